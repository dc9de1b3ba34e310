use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Dataset, Model, ParamState};
use crate::dynamics::gate;
use crate::error::{Error, Result};

/// Forward and backward fields for every datum (columns index μ).
///
/// Per-expert blocks are stored as vectors over `k`; `p`, `w`, `dw`, `a` and
/// `active` are E×P. `dw = ∂w/∂p`, i.e. `σ'(p)` masked by the active set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldState {
    pub h0: DMatrix<f64>,
    pub h3: DMatrix<f64>,
    pub f: DVector<f64>,
    pub u: Vec<DMatrix<f64>>,
    pub phi_u: Vec<DMatrix<f64>>,
    pub m: Vec<DMatrix<f64>>,
    pub p: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub dw: DMatrix<f64>,
    pub active: DMatrix<bool>,
    /// `w3 ⊙ φ'(h3) / N`.
    pub g: DMatrix<f64>,
    /// `N·g`.
    pub gtilde: DMatrix<f64>,
    pub z: Vec<DMatrix<f64>>,
    pub delta: Vec<DMatrix<f64>>,
    /// Alignment `⟨g, m_k⟩ / N` (E×P).
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// Training signal `Δ_μ = −∂ℓ/∂f_μ`.
    pub drive: DVector<f64>,
    pub loss: f64,
    pub backward_done: bool,
}

fn check(field: &'static str, m: &DMatrix<f64>) -> Result<()> {
    for (mu, col) in m.column_iter().enumerate() {
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow { field, datum: mu });
        }
    }
    Ok(())
}

impl FieldState {
    /// Largest absolute value over all forward and backward fields.
    pub fn max_abs(&self) -> f64 {
        let mx = |m: &DMatrix<f64>| m.amax();
        let mut v = mx(&self.h0).max(mx(&self.h3)).max(self.f.amax()).max(mx(&self.p)).max(mx(&self.w));
        for k in 0..self.u.len() {
            v = v.max(mx(&self.u[k])).max(mx(&self.m[k]));
        }
        if self.backward_done {
            v = v.max(mx(&self.gtilde)).max(mx(&self.q)).max(mx(&self.a));
            for z in &self.z {
                v = v.max(mx(z));
            }
        }
        v
    }

    /// `h0 + (1/E) Σ_k w_k m_k` recomputed from the stored fields.
    pub fn reconstruct_h3(&self) -> DMatrix<f64> {
        let e = self.m.len() as f64;
        let mut h3 = self.h0.clone();
        for (k, mk) in self.m.iter().enumerate() {
            for mu in 0..h3.ncols() {
                let c = self.w[(k, mu)] / e;
                h3.column_mut(mu).axpy(c, &mk.column(mu), 1.0);
            }
        }
        h3
    }
}

impl Model {
    fn check_inputs(&self, ps: &ParamState, data: &Dataset) -> Result<()> {
        ps.check_shapes(&self.dims)?;
        if data.dim() != self.dims.d || data.len() != self.dims.p {
            return Err(Error::Shape(format!(
                "dataset is {}×{}, model expects D={} P={}",
                data.dim(),
                data.len(),
                self.dims.d,
                self.dims.p
            )));
        }
        Ok(())
    }

    /// Forward pass for all data.
    pub fn forward(&self, ps: &ParamState, data: &Dataset) -> Result<FieldState> {
        self.check_inputs(ps, data)?;
        let d = &self.dims;
        let (n, e, p) = (d.n as f64, d.e as f64, d.p);
        let phi = &self.act.phi;

        let h0 = (&ps.w0 * &data.x) / (d.d as f64).sqrt();
        check("h0", &h0)?;
        let logits = (&ps.r * &h0) * n.powf(-d.gamma);
        check("p", &logits)?;
        let gated = gate(&logits, &ps.b, &self.act.sigma, self.gate, d.kappa)?;
        check("w", &gated.w)?;

        let mut u = Vec::with_capacity(d.e);
        let mut phi_u = Vec::with_capacity(d.e);
        let mut m = Vec::with_capacity(d.e);
        let mut h3 = h0.clone();
        for k in 0..d.e {
            let uk = (&ps.w1[k] * &h0) / n.sqrt();
            check("u", &uk)?;
            let pk = uk.map(|x| phi.value(x));
            let mk = (&ps.w2[k] * &pk) / (d.n_e as f64).sqrt();
            check("m", &mk)?;
            for mu in 0..p {
                h3.column_mut(mu).axpy(gated.w[(k, mu)] / e, &mk.column(mu), 1.0);
            }
            u.push(uk);
            phi_u.push(pk);
            m.push(mk);
        }
        check("h3", &h3)?;
        let f = DVector::from_fn(p, |mu, _| {
            h3.column(mu).iter().zip(ps.w3.iter()).map(|(&h, &w)| w * phi.value(h)).sum::<f64>() / n
        });
        if let Some(mu) = f.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow { field: "f", datum: mu });
        }

        Ok(FieldState {
            h0,
            h3,
            f,
            u,
            phi_u,
            m,
            p: logits,
            w: gated.w,
            dw: gated.dw,
            active: gated.active,
            g: DMatrix::zeros(d.n, p),
            gtilde: DMatrix::zeros(d.n, p),
            z: Vec::new(),
            delta: Vec::new(),
            a: DMatrix::zeros(d.e, p),
            q: DMatrix::zeros(d.n, p),
            drive: DVector::zeros(p),
            loss: f64::NAN,
            backward_done: false,
        })
    }

    /// Fills `g`, `g̃`, `z`, `δ`, `A` and `q` from a completed forward pass.
    pub fn backward(&self, ps: &ParamState, data: &Dataset, fs: &mut FieldState) -> Result<()> {
        self.check_inputs(ps, data)?;
        let d = &self.dims;
        if fs.u.len() != d.e || fs.h3.shape() != (d.n, d.p) {
            return Err(Error::State("backward needs a forward pass of matching shape".into()));
        }
        let (n, e) = (d.n as f64, d.e as f64);
        let phi = &self.act.phi;

        let mut gtilde = fs.h3.map(|h| phi.deriv(h));
        for mut col in gtilde.column_iter_mut() {
            col.component_mul_assign(&ps.w3);
        }
        let g = &gtilde / n;
        check("g", &gtilde)?;

        let mut z = Vec::with_capacity(d.e);
        let mut delta = Vec::with_capacity(d.e);
        let mut a = DMatrix::zeros(d.e, d.p);
        let mut q = g.clone();
        let inv_sqrt_ne = 1.0 / (d.n_e as f64).sqrt();
        let mut tmp = DMatrix::zeros(d.n_e, d.p);
        for k in 0..d.e {
            let mut zk = DMatrix::zeros(d.n_e, d.p);
            zk.gemm_tr(inv_sqrt_ne, &ps.w2[k], &g, 0.0);
            check("z", &zk)?;
            let dk = zk.zip_map(&fs.u[k], |zv, uv| zv * phi.deriv(uv));
            for mu in 0..d.p {
                a[(k, mu)] = g.column(mu).dot(&fs.m[k].column(mu)) / n;
                tmp.column_mut(mu).copy_from(&(dk.column(mu) * fs.w[(k, mu)]));
            }
            q.gemm_tr(1.0 / (e * n.sqrt()), &ps.w1[k], &tmp, 1.0);
            z.push(zk);
            delta.push(dk);
        }
        let router = DMatrix::from_fn(d.e, d.p, |k, mu| n.powf(-d.gamma) * fs.dw[(k, mu)] * n * a[(k, mu)] / e);
        q.gemm_tr(1.0, &ps.r, &router, 1.0);
        check("q", &q)?;

        fs.g = g;
        fs.gtilde = gtilde;
        fs.z = z;
        fs.delta = delta;
        fs.a = a;
        fs.q = q;
        fs.backward_done = true;
        Ok(())
    }

    /// Forward, loss/signal and backward in one call.
    pub fn evaluate(&self, ps: &ParamState, data: &Dataset, loss: &super::LossKind) -> Result<FieldState> {
        let mut fs = self.forward(ps, data)?;
        let (l, drive) = super::loss_and_delta(&fs.f, &data.y, loss)?;
        fs.loss = l;
        fs.drive = drive;
        self.backward(ps, data, &mut fs)?;
        Ok(fs)
    }
}
