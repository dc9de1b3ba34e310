use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{active_count, Activation, GateMode};

/// Routing weights, their logit derivative, and the active set (all E×P).
#[derive(Clone, Debug, PartialEq)]
pub struct GateOutput {
    pub w: DMatrix<f64>,
    pub dw: DMatrix<f64>,
    pub active: DMatrix<bool>,
}

/// Indices of the `count` largest entries, ties going to the lower index.
pub fn top_indices(q: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..q.len()).collect();
    idx.sort_by(|&i, &j| q[j].total_cmp(&q[i]).then(i.cmp(&j)));
    idx.truncate(count);
    idx
}

/// Gate the router logits `p` (E×P) with biases `b`.
///
/// Soft: `w = σ(p) + b`. Top-K: per datum the `κE` largest `σ(p) + b` are
/// active and carry `w = σ(p)`; the mask is treated as constant, so `dw` is
/// `σ'(p)` on the active set and zero elsewhere.
pub fn gate(p: &DMatrix<f64>, b: &DVector<f64>, sigma: &Activation, mode: GateMode, kappa: f64) -> Result<GateOutput> {
    let (e, np) = p.shape();
    if b.len() != e {
        return Err(Error::Shape(format!("{} biases for {} experts", b.len(), e)));
    }
    let s = p.map(|v| sigma.value(v));
    let ds = p.map(|v| sigma.deriv(v));
    match mode {
        GateMode::Soft => {
            let mut w = s;
            for k in 0..e {
                for mu in 0..np {
                    w[(k, mu)] += b[k];
                }
            }
            Ok(GateOutput { w, dw: ds, active: DMatrix::from_element(e, np, true) })
        }
        GateMode::TopK => {
            let count = active_count(kappa, e)?;
            let mut active = DMatrix::from_element(e, np, false);
            let mut q = vec![0.0; e];
            for mu in 0..np {
                for k in 0..e {
                    q[k] = s[(k, mu)] + b[k];
                }
                for k in top_indices(&q, count) {
                    active[(k, mu)] = true;
                }
            }
            let w = DMatrix::from_fn(e, np, |k, mu| if active[(k, mu)] { s[(k, mu)] } else { 0.0 });
            let dw = DMatrix::from_fn(e, np, |k, mu| if active[(k, mu)] { ds[(k, mu)] } else { 0.0 });
            Ok(GateOutput { w, dw, active })
        }
    }
}

/// Per-expert load: routed fraction in top-K mode, `⟨w_k⟩` clipped to
/// `[0, 1]` in soft mode.
pub fn expert_loads(w: &DMatrix<f64>, active: &DMatrix<bool>, mode: GateMode) -> DVector<f64> {
    let (e, np) = w.shape();
    DVector::from_fn(e, |k, _| match mode {
        GateMode::TopK => (0..np).filter(|&mu| active[(k, mu)]).count() as f64 / np as f64,
        GateMode::Soft => (w.row(k).sum() / np as f64).clamp(0.0, 1.0),
    })
}
