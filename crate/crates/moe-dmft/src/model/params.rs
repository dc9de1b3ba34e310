use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ModelDims;
use crate::error::{Error, Result};
use crate::seed;

/// All trainable blocks at one instant.
///
/// `w1[k]` is N_e×N, `w2[k]` is N×N_e, and row `k` of `r` is the router
/// vector of expert `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamState {
    pub w0: DMatrix<f64>,
    pub w1: Vec<DMatrix<f64>>,
    pub w2: Vec<DMatrix<f64>>,
    pub w3: DVector<f64>,
    pub r: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Per-block Gaussian standard deviations (means are zero).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitScheme {
    pub s0: f64,
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub sr: f64,
    pub sb: f64,
}

impl Default for InitScheme {
    fn default() -> Self {
        Self::unit()
    }
}

impl InitScheme {
    pub fn unit() -> Self {
        InitScheme { s0: 1.0, s1: 1.0, s2: 1.0, s3: 1.0, sr: 1.0, sb: 1.0 }
    }

    /// Routers start at zero; only the biases break the symmetry between experts.
    pub fn router_zero() -> Self {
        InitScheme { sr: 0.0, ..Self::unit() }
    }

    pub fn zeros() -> Self {
        InitScheme { s0: 0.0, s1: 0.0, s2: 0.0, s3: 0.0, sr: 0.0, sb: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.s0, self.s1, self.s2, self.s3, self.sr, self.sb];
        if all.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::config("init standard deviations must be finite and non-negative"));
        }
        Ok(())
    }
}

impl ParamState {
    pub fn zeros(dims: &ModelDims) -> Self {
        ParamState {
            w0: DMatrix::zeros(dims.n, dims.d),
            w1: vec![DMatrix::zeros(dims.n_e, dims.n); dims.e],
            w2: vec![DMatrix::zeros(dims.n, dims.n_e); dims.e],
            w3: DVector::zeros(dims.n),
            r: DMatrix::zeros(dims.e, dims.n),
            b: DVector::zeros(dims.e),
        }
    }

    pub fn check_shapes(&self, dims: &ModelDims) -> Result<()> {
        let bad = self.w0.shape() != (dims.n, dims.d)
            || self.w1.len() != dims.e
            || self.w2.len() != dims.e
            || self.w1.iter().any(|m| m.shape() != (dims.n_e, dims.n))
            || self.w2.iter().any(|m| m.shape() != (dims.n, dims.n_e))
            || self.w3.len() != dims.n
            || self.r.shape() != (dims.e, dims.n)
            || self.b.len() != dims.e;
        if bad {
            return Err(Error::Shape("parameter shapes disagree with model dimensions".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.w0.iter().all(|v| v.is_finite())
            && self.w1.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.w2.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.w3.iter().all(|v| v.is_finite())
            && self.r.iter().all(|v| v.is_finite())
            && self.b.iter().all(|v| v.is_finite())
    }

    /// Frobenius norms in block order (W0, W1, W2, w3, r, b).
    pub fn block_norms(&self) -> [f64; 6] {
        let sq = |ms: &[DMatrix<f64>]| ms.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt();
        [self.w0.norm(), sq(&self.w1), sq(&self.w2), self.w3.norm(), self.r.norm(), self.b.norm()]
    }

    /// Relabel experts: new expert `j` is old expert `perm[j]`.
    pub fn permute_experts(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        for (j, &k) in perm.iter().enumerate() {
            out.w1[j] = self.w1[k].clone();
            out.w2[j] = self.w2[k].clone();
            out.r.set_row(j, &self.r.row(k));
            out.b[j] = self.b[k];
        }
        out
    }
}

fn gaussian(master: u64, label: &str, std: f64, out: &mut [f64]) {
    if std == 0.0 {
        out.fill(0.0);
        return;
    }
    seed::fill_normal(&mut seed::stream(master, label), out);
    out.iter_mut().for_each(|v| *v *= std);
}

/// I.i.d. Gaussian initialization.
///
/// Each row of W0, each hidden unit of every expert (a row of W1_k and the
/// matching column of W2_k), every router vector and every bias draws from
/// its own named stream, so a model with more experts or wider experts
/// extends a smaller one built from the same seed.
pub fn init_params(dims: &ModelDims, scheme: &InitScheme, seed: u64) -> Result<ParamState> {
    dims.validate(super::GateMode::Soft)?;
    scheme.validate()?;
    let mut ps = ParamState::zeros(dims);
    let mut row = vec![0.0; dims.d.max(dims.n)];

    for i in 0..dims.n {
        gaussian(seed, &format!("w0/{i}"), scheme.s0, &mut row[..dims.d]);
        for j in 0..dims.d {
            ps.w0[(i, j)] = row[j];
        }
    }
    for k in 0..dims.e {
        for a in 0..dims.n_e {
            gaussian(seed, &format!("w1/{k}/{a}"), scheme.s1, &mut row[..dims.n]);
            for i in 0..dims.n {
                ps.w1[k][(a, i)] = row[i];
            }
            gaussian(seed, &format!("w2/{k}/{a}"), scheme.s2, ps.w2[k].column_mut(a).as_mut_slice());
        }
        gaussian(seed, &format!("r/{k}"), scheme.sr, &mut row[..dims.n]);
        for i in 0..dims.n {
            ps.r[(k, i)] = row[i];
        }
        gaussian(seed, &format!("b/{k}"), scheme.sb, std::slice::from_mut(&mut ps.b[k]));
    }
    gaussian(seed, "w3", scheme.s3, ps.w3.as_mut_slice());
    Ok(ps)
}
