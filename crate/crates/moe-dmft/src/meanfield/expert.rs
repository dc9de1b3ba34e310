use nalgebra::DMatrix;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use super::gp::{psd_cholesky, sample_rows};
use super::{quantile_threshold, DmftConfig, DmftKernels, ProbeMode};
use crate::dynamics::BiasMode;
use crate::error::{Error, Result};
use crate::model::GateMode;
use crate::seed::{self, StreamRng};

/// Experts per work unit in soft mode; partial sums are merged in unit order.
const CHUNK: usize = 16;

struct Ctx<'a> {
    cfg: &'a DmftConfig,
    k: &'a DmftKernels,
    p: usize,
    nt: usize,
    t: usize,
    mw: usize,
    c1: f64,
    c2: f64,
    cr: f64,
    cb: f64,
    dt_p: f64,
    sa: f64,
    lh: DMatrix<f64>,
    lg: DMatrix<f64>,
}

impl<'a> Ctx<'a> {
    fn new(cfg: &'a DmftConfig, k: &'a DmftKernels, mw: usize) -> Result<Self> {
        let t = cfg.flat_len();
        if k.c_h.shape() != (t, t) || k.p != cfg.p() {
            return Err(Error::Shape(format!("kernels are {:?}, configuration needs {t}×{t}", k.c_h.shape())));
        }
        let [_, c1, c2, _, cr, cb] = cfg.rates.effective();
        let (s1, s2) = (cfg.init.s1, cfg.init.s2);
        Ok(Ctx {
            cfg,
            k,
            p: cfg.p(),
            nt: cfg.nt(),
            t,
            mw,
            c1,
            c2,
            cr,
            cb,
            dt_p: cfg.dt / cfg.p() as f64,
            sa: cfg.alpha.sqrt(),
            lh: psd_cholesky(&(&k.c_h * (s1 * s1)))?,
            lg: psd_cholesky(&(&k.c_g * (s2 * s2)))?,
        })
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Source {
    Chi,
    Xi,
}

/// Forward tangent of the within dynamics seeded by a probe on `χ` or `ξ`.
struct Tangent {
    src: Source,
    weight: f64,
    v: DMatrix<f64>,
    dphu: DMatrix<f64>,
    dg1: DMatrix<f64>,
}

struct Within {
    chi: DMatrix<f64>,
    xi: DMatrix<f64>,
    u: DMatrix<f64>,
    phu: DMatrix<f64>,
    z: DMatrix<f64>,
    g1: DMatrix<f64>,
    phi1: DMatrix<f64>,
    tangents: Vec<Tangent>,
}

impl Within {
    fn new(ctx: &Ctx, rng: &mut StreamRng) -> Self {
        let (mw, t) = (ctx.mw, ctx.t);
        let chi = sample_rows(&ctx.lh, mw, rng);
        let xi = sample_rows(&ctx.lg, mw, rng);
        let zero = || DMatrix::<f64>::zeros(mw, t);
        let mut tangents = Vec::new();
        for src in [Source::Chi, Source::Xi] {
            match ctx.cfg.probes {
                ProbeMode::Rademacher { count } => {
                    for _ in 0..count {
                        let mut v = zero();
                        seed::fill_rademacher(rng, v.as_mut_slice());
                        tangents.push(Tangent { src, weight: 1.0 / count as f64, v, dphu: zero(), dg1: zero() });
                    }
                }
                ProbeMode::Exact => {
                    for j in 0..t {
                        let mut v = zero();
                        v.column_mut(j).fill(1.0);
                        tangents.push(Tangent { src, weight: 1.0, v, dphu: zero(), dg1: zero() });
                    }
                }
            }
        }
        Within { chi, xi, u: zero(), phu: zero(), z: zero(), g1: zero(), phi1: DMatrix::zeros(t, t), tangents }
    }

    /// Advance every sample and tangent to step `n` under gate path `w`
    /// (only `w` before step `n` is read).
    fn step(&mut self, ctx: &Ctx, n: usize, w: &[f64]) {
        let (p, blk, mw) = (ctx.p, n * ctx.p, ctx.mw);
        let phi = &ctx.cfg.act.phi;
        let k = ctx.k;
        let coefs = (blk > 0).then(|| {
            let a = DMatrix::from_fn(blk, p, |j, nu| ctx.c1 * ctx.dt_p * k.delta_flat(j) * w[j] * k.c_h[(j, blk + nu)]);
            let b = DMatrix::from_fn(blk, p, |j, nu| {
                ctx.c2 / ctx.sa * ctx.dt_p * k.delta_flat(j) * w[j] * k.c_g[(j, blk + nu)]
            });
            (a, b)
        });

        let mut ub = self.chi.columns(blk, p).into_owned();
        if let Some((a, _)) = &coefs {
            ub += self.g1.columns(0, blk) * a;
        }
        let d1 = ub.map(|x| phi.deriv(x));
        let d2 = ub.map(|x| phi.second(x));
        let phb = ub.map(|x| phi.value(x));
        self.u.columns_mut(blk, p).copy_from(&ub);
        self.phu.columns_mut(blk, p).copy_from(&phb);
        let mut zb = self.xi.columns(blk, p).into_owned();
        if let Some((_, b)) = &coefs {
            zb += self.phu.columns(0, blk) * b;
        }
        self.g1.columns_mut(blk, p).copy_from(&d1.component_mul(&zb));
        self.z.columns_mut(blk, p).copy_from(&zb);

        for tg in &mut self.tangents {
            let seed_of = |s: Source| {
                if tg.src == s {
                    tg.v.columns(blk, p).into_owned()
                } else {
                    DMatrix::zeros(mw, p)
                }
            };
            let mut du = seed_of(Source::Chi);
            let mut dz = seed_of(Source::Xi);
            if let Some((a, _)) = &coefs {
                du += tg.dg1.columns(0, blk) * a;
            }
            let dph = d1.component_mul(&du);
            tg.dphu.columns_mut(blk, p).copy_from(&dph);
            if let Some((_, b)) = &coefs {
                dz += tg.dphu.columns(0, blk) * b;
            }
            let dg = d2.component_mul(&du).component_mul(&zb) + d1.component_mul(&dz);
            tg.dg1.columns_mut(blk, p).copy_from(&dg);
        }

        let cross = self.phu.columns(0, blk + p).tr_mul(&phb) / mw as f64;
        self.phi1.view_mut((0, blk), (blk + p, p)).copy_from(&cross);
        self.phi1.view_mut((blk, 0), (p, blk + p)).copy_from(&cross.transpose());
    }

    /// `Ã(n) = √α ⟨φ(u) ξ⟩ + Σ_{m<n} c2 Δt/P Δ w C_g Φ¹`.
    fn alignment(&self, ctx: &Ctx, n: usize, w: &[f64]) -> Vec<f64> {
        let (p, blk, mw) = (ctx.p, n * ctx.p, ctx.mw as f64);
        let k = ctx.k;
        (0..p)
            .map(|nu| {
                let j = blk + nu;
                let rnd = self.phu.column(j).dot(&self.xi.column(j)) / mw;
                let learned: f64 =
                    (0..blk).map(|i| k.delta_flat(i) * w[i] * k.c_g[(i, j)] * self.phi1[(i, j)]).sum::<f64>();
                ctx.sa * rnd + ctx.c2 * ctx.dt_p * learned
            })
            .collect()
    }

    fn phi1(&self) -> DMatrix<f64> {
        (&self.phi1 + self.phi1.transpose()) * 0.5
    }

    fn psi(&self) -> DMatrix<f64> {
        let g = self.g1.tr_mul(&self.g1) / self.g1.nrows() as f64;
        (&g + g.transpose()) * 0.5
    }

    /// Pathwise sensitivities `(∂φ(u)/∂ξ, ∂g¹/∂χ)` averaged over samples,
    /// rows indexing the effect. The known equal-time part of `∂g¹/∂χ` is
    /// removed from the tangents before estimating, then added back exactly.
    fn sensitivities(&self, ctx: &Ctx) -> (DMatrix<f64>, DMatrix<f64>) {
        let (t, p, mw) = (ctx.t, ctx.p, ctx.mw);
        let phi = &ctx.cfg.act.phi;
        let d2z = DMatrix::from_fn(mw, t, |a, j| phi.second(self.u[(a, j)]) * self.z[(a, j)]);
        let mut sx = DMatrix::<f64>::zeros(t, t);
        let mut sc = DMatrix::<f64>::zeros(t, t);
        for tg in &self.tangents {
            let s = tg.weight / mw as f64;
            match tg.src {
                Source::Xi => sx += tg.dphu.tr_mul(&tg.v) * s,
                Source::Chi => {
                    let g = &tg.dg1 - d2z.component_mul(&tg.v);
                    sc += g.tr_mul(&tg.v) * s;
                }
            }
        }
        for i in 0..t {
            for j in 0..t {
                if j / p >= i / p {
                    sx[(i, j)] = 0.0;
                    sc[(i, j)] = 0.0;
                }
            }
            sc[(i, i)] = d2z.column(i).sum() / mw as f64;
        }
        (sx, sc)
    }
}

struct ExpertState {
    b: f64,
    bpath: Vec<f64>,
    p: Vec<f64>,
    w: Vec<f64>,
    dw: Vec<f64>,
    at: Vec<f64>,
    active: Vec<bool>,
    within: Within,
}

impl ExpertState {
    fn new(ctx: &Ctx, idx: usize, m: usize, seed: u64) -> Self {
        let mut rng = seed::stream(seed, &format!("expert/{idx}"));
        let z = Normal::standard().inverse_cdf((idx as f64 + 0.5) / m as f64);
        let t = ctx.t;
        ExpertState {
            b: ctx.cfg.init.sb * z,
            bpath: vec![0.0; ctx.nt],
            p: vec![0.0; t],
            w: vec![0.0; t],
            dw: vec![0.0; t],
            at: vec![0.0; t],
            active: vec![false; t],
            within: Within::new(ctx, &mut rng),
        }
    }

    /// Router logits at step `n`; returns the gate scores `σ(p) + b`.
    fn logits(&mut self, ctx: &Ctx, n: usize) -> Vec<f64> {
        let (p, blk) = (ctx.p, n * ctx.p);
        let k = ctx.k;
        let sigma = &ctx.cfg.act.sigma;
        (0..p)
            .map(|nu| {
                let j = blk + nu;
                let s: f64 = (0..blk).map(|i| k.delta_flat(i) * self.at[i] * self.dw[i] * k.c_h[(i, j)]).sum();
                self.p[j] = ctx.cr * ctx.dt_p * s;
                sigma.value(self.p[j]) + self.b
            })
            .collect()
    }

    fn gate(&mut self, ctx: &Ctx, n: usize, mask: Option<&[bool]>) {
        let sigma = &ctx.cfg.act.sigma;
        for nu in 0..ctx.p {
            let j = n * ctx.p + nu;
            let (s, ds) = (sigma.value(self.p[j]), sigma.deriv(self.p[j]));
            let on = mask.is_none_or(|m| m[nu]);
            self.active[j] = on;
            (self.w[j], self.dw[j]) = match (mask, on) {
                (None, _) => (s + self.b, ds),
                (Some(_), true) => (s, ds),
                (Some(_), false) => (0.0, 0.0),
            };
        }
    }

    fn advance(&mut self, ctx: &Ctx, n: usize) {
        let (p, blk) = (ctx.p, n * ctx.p);
        self.within.step(ctx, n, &self.w);
        let a = self.within.alignment(ctx, n, &self.w);
        self.at[blk..blk + p].copy_from_slice(&a);
        self.bpath[n] = self.b;
        let cfg = ctx.cfg;
        match (cfg.bias, cfg.gate) {
            (BiasMode::Gradient, GateMode::Soft) => {
                let s: f64 = (0..p).map(|nu| ctx.k.delta[(nu, n)] * a[nu]).sum();
                self.b += ctx.cb * ctx.dt_p * s;
            }
            (BiasMode::Balance { eta_bias }, gate) => {
                let load = match gate {
                    GateMode::TopK => self.active[blk..blk + p].iter().filter(|&&x| x).count() as f64 / p as f64,
                    GateMode::Soft => (self.w[blk..blk + p].iter().sum::<f64>() / p as f64).clamp(0.0, 1.0),
                };
                self.b -= eta_bias * cfg.rates.gamma0 * cfg.dt * (load - cfg.kappa);
            }
            _ => {}
        }
    }
}

#[derive(Clone)]
struct Acc {
    m_phi: DMatrix<f64>,
    m_psi: DMatrix<f64>,
    m_aa: DMatrix<f64>,
    r_phixi: DMatrix<f64>,
    r_gchi: DMatrix<f64>,
    m_a: Vec<f64>,
    active: Vec<f64>,
}

impl Acc {
    fn new(t: usize) -> Self {
        let z = DMatrix::zeros(t, t);
        Acc { m_phi: z.clone(), m_psi: z.clone(), m_aa: z.clone(), r_phixi: z.clone(), r_gchi: z, m_a: vec![0.0; t], active: vec![0.0; t] }
    }

    fn add(&mut self, ctx: &Ctx, st: &ExpertState) {
        let t = ctx.t;
        let w = nalgebra::DVector::from_column_slice(&st.w);
        let ww = &w * w.transpose();
        self.m_phi += st.within.phi1().component_mul(&ww);
        self.m_psi += st.within.psi().component_mul(&ww);
        let adw = nalgebra::DVector::from_fn(t, |j, _| st.at[j] * st.dw[j]);
        self.m_aa += &adw * adw.transpose();
        let (sx, sc) = st.within.sensitivities(ctx);
        for j in 0..t {
            for i in 0..t {
                self.r_phixi[(i, j)] += st.w[i] * sx[(i, j)];
                self.r_gchi[(i, j)] += st.w[i] * sc[(i, j)];
            }
        }
        for i in 0..t {
            self.m_a[i] += adw[i];
            self.active[i] += if st.active[i] { 1.0 } else { 0.0 };
        }
    }

    fn merge(&mut self, o: &Acc) {
        self.m_phi += &o.m_phi;
        self.m_psi += &o.m_psi;
        self.m_aa += &o.m_aa;
        self.r_phixi += &o.r_phixi;
        self.r_gchi += &o.r_gchi;
        for (a, b) in self.m_a.iter_mut().zip(&o.m_a) {
            *a += b;
        }
        for (a, b) in self.active.iter_mut().zip(&o.active) {
            *a += b;
        }
    }
}

/// Expert-site population with its gate-weighted mixtures.
#[derive(Clone, Debug)]
pub struct ExpertSample {
    /// Per-expert paths, M×T (`b` is M×(steps+1)).
    pub p: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub at: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub m_phi: DMatrix<f64>,
    pub m_psi: DMatrix<f64>,
    pub m_aa: DMatrix<f64>,
    pub m_a: DMatrix<f64>,
    pub r_phixi: DMatrix<f64>,
    pub r_gchi: DMatrix<f64>,
    pub q_star: Option<DMatrix<f64>>,
    pub active_fraction: Option<DMatrix<f64>>,
}

struct Paths {
    p: Vec<f64>,
    w: Vec<f64>,
    at: Vec<f64>,
    b: Vec<f64>,
}

fn paths(st: &ExpertState) -> Paths {
    Paths { p: st.p.clone(), w: st.w.clone(), at: st.at.clone(), b: st.bpath.clone() }
}

/// Sample `m` experts, each carrying its own within population, against
/// the kernels `k`. Expert biases are stratified normal quantiles
/// `sb Φ⁻¹((i + ½)/m)`. In soft mode experts are independent and run one
/// at a time; top-K couples them through the per-datum threshold, so the
/// whole population advances in lockstep.
pub fn sample_expert_site(cfg: &DmftConfig, k: &DmftKernels, m: usize, seed: u64) -> Result<ExpertSample> {
    let ctx = Ctx::new(cfg, k, cfg.pops.within)?;
    let (p, nt, t) = (ctx.p, ctx.nt, ctx.t);
    let mut acc = Acc::new(t);
    let mut all: Vec<Paths> = Vec::with_capacity(m);
    let mut q_star = None;
    match cfg.gate {
        GateMode::Soft => {
            let ids: Vec<usize> = (0..m).collect();
            let parts: Vec<(Acc, Vec<Paths>)> = ids
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut a = Acc::new(t);
                    let mut ps = Vec::with_capacity(chunk.len());
                    for &i in chunk {
                        let mut st = ExpertState::new(&ctx, i, m, seed);
                        for n in 0..nt {
                            st.logits(&ctx, n);
                            st.gate(&ctx, n, None);
                            st.advance(&ctx, n);
                        }
                        a.add(&ctx, &st);
                        ps.push(paths(&st));
                    }
                    (a, ps)
                })
                .collect();
            for (a, ps) in parts {
                acc.merge(&a);
                all.extend(ps);
            }
        }
        GateMode::TopK => {
            let mut states: Vec<ExpertState> = (0..m).into_par_iter().map(|i| ExpertState::new(&ctx, i, m, seed)).collect();
            let mut qs = DMatrix::<f64>::zeros(p, nt);
            for n in 0..nt {
                let scores: Vec<Vec<f64>> = states.par_iter_mut().map(|s| s.logits(&ctx, n)).collect();
                let mut masks = vec![vec![false; p]; m];
                for nu in 0..p {
                    let col: Vec<f64> = scores.iter().map(|s| s[nu]).collect();
                    let (thr, mask) = quantile_threshold(&col, cfg.kappa)?;
                    qs[(nu, n)] = thr;
                    for (i, on) in mask.into_iter().enumerate() {
                        masks[i][nu] = on;
                    }
                }
                states.par_iter_mut().zip(masks.par_iter()).for_each(|(s, mk)| {
                    s.gate(&ctx, n, Some(mk));
                    s.advance(&ctx, n);
                });
            }
            for st in &states {
                acc.add(&ctx, st);
                all.push(paths(st));
            }
            q_star = Some(qs);
        }
    }
    let mf = m as f64;
    let flat = |v: &[f64]| DMatrix::from_fn(p, nt, |nu, n| v[n * p + nu] / mf);
    let rows = |f: fn(&Paths) -> &Vec<f64>, len: usize| DMatrix::from_fn(m, len, |i, j| f(&all[i])[j]);
    Ok(ExpertSample {
        p: rows(|x| &x.p, t),
        w: rows(|x| &x.w, t),
        at: rows(|x| &x.at, t),
        b: rows(|x| &x.b, nt),
        m_phi: acc.m_phi / mf,
        m_psi: acc.m_psi / mf,
        m_aa: acc.m_aa / mf,
        m_a: flat(&acc.m_a),
        r_phixi: acc.r_phixi / mf,
        r_gchi: acc.r_gchi / mf,
        active_fraction: q_star.as_ref().map(|_| flat(&acc.active)),
        q_star,
    })
}

/// Within-site population driven by a prescribed gate path.
#[derive(Clone, Debug)]
pub struct WithinSample {
    pub chi: DMatrix<f64>,
    pub xi: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub g1: DMatrix<f64>,
    pub phi1: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub s_phixi: DMatrix<f64>,
    pub s_gchi: DMatrix<f64>,
    /// `Ã` along the path, length T.
    pub alignment: Vec<f64>,
}

/// Sample `m` within sites for one expert whose gate weights are `w_path`
/// (length T):
///
/// ```text
/// u(n) = χ(n) + Σ_{m<n} c1 Δt/P Δ(m) w(m) C_h(m,n) g¹(m)
/// z(n) = ξ(n) + Σ_{m<n} c2 α^{-1/2} Δt/P Δ(m) w(m) C_g(m,n) φ(u(m))
/// g¹(n) = φ'(u(n)) z(n)
/// ```
pub fn sample_within_site(cfg: &DmftConfig, k: &DmftKernels, w_path: &[f64], m: usize, seed: u64) -> Result<WithinSample> {
    let ctx = Ctx::new(cfg, k, m)?;
    if w_path.len() != ctx.t {
        return Err(Error::Shape(format!("gate path of length {}, expected {}", w_path.len(), ctx.t)));
    }
    let mut w = Within::new(&ctx, &mut seed::stream(seed, "within"));
    let mut alignment = Vec::with_capacity(ctx.t);
    for n in 0..ctx.nt {
        w.step(&ctx, n, w_path);
        alignment.extend(w.alignment(&ctx, n, w_path));
    }
    let (s_phixi, s_gchi) = w.sensitivities(&ctx);
    Ok(WithinSample {
        phi1: w.phi1(),
        psi: w.psi(),
        chi: w.chi,
        xi: w.xi,
        u: w.u,
        z: w.z,
        g1: w.g1,
        s_phixi,
        s_gchi,
        alignment,
    })
}
