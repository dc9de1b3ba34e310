//! Single-block mixture-of-experts residual model: dimensions, data,
//! parameters, activations and the exact forward/backward field maps.
//!
//! Per datum `x_μ` and expert `k`:
//!
//! ```text
//! h0 = W0 x / √D            u_k = W1_k h0 / √N        m_k = W2_k φ(u_k) / √N_e
//! p_k = N^{-γ} ⟨r_k, h0⟩     w_k = gate(p_k, b_k)
//! h3 = h0 + (1/E) Σ_k w_k m_k                         f = ⟨w3, φ(h3)⟩ / N
//! ```
//!
//! Backward fields: `g = w3 ⊙ φ'(h3) / N` (and `g̃ = N g`),
//! `z_k = W2_kᵀ g / √N_e`, `δ_k = z_k ⊙ φ'(u_k)`, `A_k = ⟨g, m_k⟩ / N` and the
//! embedding backprop field `q = ∂f/∂h0`.

mod activation;
mod data;
mod fields;
mod loss;
mod params;

pub use activation::{probe_grid, ActKind, Activation, Activations, ScalarMap};
pub use data::Dataset;
pub use fields::FieldState;
pub use loss::{loss_and_delta, LossHook, LossKind};
pub use params::{init_params, InitScheme, ParamState};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale parameters of one model instance plus the Euler grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub d: usize,
    pub n: usize,
    pub e: usize,
    pub n_e: usize,
    pub p: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default)]
    pub steps: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
}

fn default_gamma() -> f64 {
    1.0
}
fn default_kappa() -> f64 {
    1.0
}
fn default_dt() -> f64 {
    0.1
}

impl ModelDims {
    pub fn new(d: usize, n: usize, e: usize, n_e: usize, p: usize) -> Self {
        ModelDims { d, n, e, n_e, p, gamma: 1.0, kappa: 1.0, steps: 0, dt: 0.1 }
    }

    pub fn with_steps(mut self, steps: usize, dt: f64) -> Self {
        self.steps = steps;
        self.dt = dt;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    /// Expert width ratio `N_e / N`.
    pub fn alpha(&self) -> f64 {
        self.n_e as f64 / self.n as f64
    }

    pub fn validate(&self, gate: GateMode) -> Result<()> {
        for (name, v) in [("d", self.d), ("n", self.n), ("e", self.e), ("n_e", self.n_e), ("p", self.p)] {
            if v == 0 {
                return Err(Error::config(format!("dimension `{name}` must be at least 1")));
            }
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::config(format!("kappa = {} must lie in (0, 1]", self.kappa)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config(format!("dt = {} must be positive", self.dt)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("gamma = {} must be non-negative", self.gamma)));
        }
        if gate == GateMode::TopK {
            self.active_experts()?;
        }
        Ok(())
    }

    /// Number of experts routed per datum in top-K mode, `κE`.
    pub fn active_experts(&self) -> Result<usize> {
        active_count(self.kappa, self.e)
    }
}

/// `κ·E` as an integer, or a configuration error.
pub fn active_count(kappa: f64, e: usize) -> Result<usize> {
    let k = kappa * e as f64;
    let r = k.round();
    if (k - r).abs() > 1e-9 || r < 1.0 {
        return Err(Error::config(format!("kappa·E = {k} is not a positive integer")));
    }
    Ok(r as usize)
}

/// How the routing weights are formed from the router logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// `w = σ(p) + b` for every expert.
    #[default]
    Soft,
    /// Per datum only the `κE` largest `σ(p) + b` are active, with `w = σ(p)`.
    #[serde(alias = "topk")]
    TopK,
}

/// Everything needed to evaluate the fields of a parameter state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub dims: ModelDims,
    pub act: Activations,
    pub gate: GateMode,
}

impl Model {
    pub fn new(dims: ModelDims, act: Activations, gate: GateMode) -> Result<Self> {
        dims.validate(gate)?;
        Ok(Model { dims, act, gate })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(ModelDims::new(1, 1, 1, 1, 1).validate(GateMode::Soft).is_ok());
        assert!(ModelDims::new(0, 1, 1, 1, 1).validate(GateMode::Soft).is_err());
        let d = ModelDims::new(2, 4, 4, 2, 1).with_kappa(0.3);
        assert!(d.validate(GateMode::Soft).is_ok());
        assert!(d.validate(GateMode::TopK).is_err());
        assert_eq!(ModelDims::new(2, 4, 4, 2, 1).with_kappa(0.5).active_experts().unwrap(), 2);
        let mut bad = ModelDims::new(1, 1, 1, 1, 1);
        bad.dt = 0.0;
        assert!(bad.validate(GateMode::Soft).is_err());
    }

    #[test]
    fn alpha_is_width_ratio() {
        assert_eq!(ModelDims::new(1, 64, 8, 16, 1).alpha(), 0.25);
    }
}
