use nalgebra::{DMatrix, DVector};

use super::gp::{psd_cholesky, sample_rows, sample_rows_matched};
use super::{DmftConfig, DmftKernels};
use crate::error::Result;
use crate::seed;

/// Residual-site paths, each M×T except `w3` (M×(steps+1)).
#[derive(Clone, Debug)]
pub struct ResidualSample {
    pub h0: DMatrix<f64>,
    pub h3: DMatrix<f64>,
    pub phi_h3: DMatrix<f64>,
    pub gt: DMatrix<f64>,
    pub qt: DMatrix<f64>,
    pub w3: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub delta: DMatrix<f64>,
}

fn gram(x: &DMatrix<f64>) -> DMatrix<f64> {
    let g = x.tr_mul(x) / x.nrows() as f64;
    (&g + g.transpose()) * 0.5
}

impl ResidualSample {
    pub fn c_h(&self) -> DMatrix<f64> {
        gram(&self.h0)
    }

    pub fn c_g(&self) -> DMatrix<f64> {
        gram(&self.gt)
    }

    pub fn c_phi3(&self) -> DMatrix<f64> {
        gram(&self.phi_h3)
    }
}

/// Sample `m` residual sites in lockstep against the kernels `k`.
///
/// `h0(0)` and `w3(0)` are drawn with exactly matched first and second
/// moments when `m` allows it. Per step:
///
/// ```text
/// h3(n) = h0(n) + Σ_{m<n} [√α s2² R_φξ(n,m) + c2 Δt/P Δ(m) M_Φ(m,n)] g̃(m)
/// q̃(n)  = g̃(n) + Σ_{m≤n} √α s1² R_gχ(n,m) h0(m)
///               + Σ_{m<n} Δt/P Δ(m) [c_r M_AA + c1 √α M_Ψ](m,n) h0(m)
/// h0(n+1) = h0(n) + c0 Δt/P Σ_μ Δ_μ(n) q̃_μ(n) Kx_μν / D
/// ```
///
/// with `Δ` computed from this population's own output.
pub fn sample_residual_site(cfg: &DmftConfig, k: &DmftKernels, m: usize, seed: u64) -> Result<ResidualSample> {
    let (p, nt, t) = (cfg.p(), cfg.nt(), cfg.flat_len());
    let [c0, c1, c2, c3, cr, _] = cfg.rates.effective();
    let (dt, pf) = (cfg.dt, p as f64);
    let sa = cfg.alpha.sqrt();
    let (s1sq, s2sq) = (cfg.init.s1 * cfg.init.s1, cfg.init.s2 * cfg.init.s2);
    let phi = &cfg.act.phi;
    let kxd = &cfg.data.kx / cfg.data.dim() as f64;

    let mut rng = seed::stream(seed, "residual/init");
    let l0 = psd_cholesky(&(&kxd * (cfg.init.s0 * cfg.init.s0)))?;
    let h0_init = if m > p { sample_rows_matched(&l0, m, &mut rng)? } else { sample_rows(&l0, m, &mut rng) };
    let mut w3 = DVector::<f64>::zeros(m);
    seed::fill_normal(&mut rng, w3.as_mut_slice());
    let mean = w3.mean();
    w3.add_scalar_mut(-mean);
    let sd = (w3.norm_squared() / m as f64).sqrt();
    w3 *= if sd > 0.0 { cfg.init.s3 / sd } else { 0.0 };

    let noise = |mix: &DMatrix<f64>, s: f64, label: &str| -> Result<Option<DMatrix<f64>>> {
        if cfg.alpha_star == 0.0 {
            return Ok(None);
        }
        let l = psd_cholesky(&(mix * (cfg.alpha_star * cfg.alpha * s)))?;
        Ok(Some(sample_rows(&l, m, &mut seed::stream(seed, label))))
    };
    let u_noise = noise(&k.m_phi, s2sq, "residual/u-noise")?;
    let r_noise = noise(&k.m_psi, s1sq, "residual/r-noise")?;

    let mut h0 = DMatrix::<f64>::zeros(m, t);
    let mut h3 = DMatrix::<f64>::zeros(m, t);
    let mut ph3 = DMatrix::<f64>::zeros(m, t);
    let mut gt = DMatrix::<f64>::zeros(m, t);
    let mut qt = DMatrix::<f64>::zeros(m, t);
    let mut w3_path = DMatrix::<f64>::zeros(m, nt);
    let mut f = DMatrix::<f64>::zeros(p, nt);
    let mut delta = DMatrix::<f64>::zeros(p, nt);
    let dflat = |delta: &DMatrix<f64>, j: usize| delta[(j % p, j / p)];

    h0.columns_mut(0, p).copy_from(&h0_init);
    for n in 0..nt {
        let blk = n * p;
        if n > 0 {
            let prev = blk - p;
            let coef = DMatrix::from_fn(p, p, |mu, nu| c0 * dt / pf * delta[(mu, n - 1)] * kxd[(mu, nu)]);
            let next = h0.columns(prev, p) + qt.columns(prev, p) * coef;
            h0.columns_mut(blk, p).copy_from(&next);
            for r in 0..m {
                let s: f64 = (0..p).map(|mu| delta[(mu, n - 1)] * ph3[(r, prev + mu)]).sum();
                w3[r] += c3 * dt / pf * s;
            }
        }
        w3_path.set_column(n, &w3);

        let mut h3b = h0.columns(blk, p).into_owned();
        if n > 0 {
            let kh = DMatrix::from_fn(blk, p, |j, nu| {
                sa * s2sq * k.r_phixi[(blk + nu, j)] + c2 * dt / pf * dflat(&delta, j) * k.m_phi[(j, blk + nu)]
            });
            h3b += gt.columns(0, blk) * kh;
        }
        if let Some(z) = &u_noise {
            h3b += z.columns(blk, p);
        }
        for nu in 0..p {
            let mut acc = 0.0;
            for r in 0..m {
                let x = h3b[(r, nu)];
                let v = phi.value(x);
                h3[(r, blk + nu)] = x;
                ph3[(r, blk + nu)] = v;
                gt[(r, blk + nu)] = w3[r] * phi.deriv(x);
                acc += w3[r] * v;
            }
            f[(nu, n)] = acc / m as f64;
            delta[(nu, n)] = -cfg.loss.deriv(f[(nu, n)], cfg.data.y[nu]);
        }

        let kq = DMatrix::from_fn(blk + p, p, |j, nu| {
            let mut v = sa * s1sq * k.r_gchi[(blk + nu, j)];
            if j < blk {
                v += dt / pf * dflat(&delta, j) * (cr * k.m_aa[(j, blk + nu)] + c1 * sa * k.m_psi[(j, blk + nu)]);
            }
            v
        });
        let mut qb = gt.columns(blk, p) + h0.columns(0, blk + p) * kq;
        if let Some(z) = &r_noise {
            qb += z.columns(blk, p);
        }
        qt.columns_mut(blk, p).copy_from(&qb);
    }
    Ok(ResidualSample { h0, h3, phi_h3: ph3, gt, qt, w3: w3_path, f, delta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meanfield::MeanFieldRates;
    use crate::model::{Activations, Dataset};

    fn cfg(gamma0: f64) -> DmftConfig {
        let mut r = MeanFieldRates::uniform(1.0);
        r.gamma0 = gamma0;
        let mut c = DmftConfig::new(Dataset::probe_task(6, 3, 1), 4, 0.1, r);
        c.init.s3 = 1.0;
        c
    }

    #[test]
    fn no_drive_keeps_the_input_kernel() {
        let c = cfg(0.0);
        let k = DmftKernels::initial(&c);
        let s = sample_residual_site(&c, &k, 200, 3).unwrap();
        assert!((s.c_h() - &k.c_h).amax() < 1e-12);
    }

    #[test]
    fn identity_readout_kernel_equals_input_kernel_at_start() {
        let mut c = cfg(1.0);
        c.act = Activations::identity();
        let k = DmftKernels::initial(&c);
        let s = sample_residual_site(&c, &k, 300, 4).unwrap();
        let (ch, cp) = (s.c_h(), s.c_phi3());
        assert!((ch.view((0, 0), (3, 3)) - cp.view((0, 0), (3, 3))).amax() < 1e-12);
    }

    #[test]
    fn readout_learns_from_the_signal() {
        let c = cfg(1.0);
        let k = DmftKernels::initial(&c);
        let s = sample_residual_site(&c, &k, 400, 5).unwrap();
        let l = k.loss_curve(&c.data.y, &c.loss);
        let kk = DmftKernels { f: s.f.clone(), ..k };
        let l2 = kk.loss_curve(&c.data.y, &c.loss);
        assert!(l2[4] < l[4]);
    }
}
