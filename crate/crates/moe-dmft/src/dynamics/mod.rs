//! Per-block gradients, explicit Euler integration of multi-rate gradient
//! flow, gating, bias balancing and full trajectory runs.

mod bias;
mod gate;
mod grad;
mod run;
mod trace;

pub use bias::bias_balance_step;
pub use gate::{expert_loads, gate, top_indices, GateOutput};
pub use grad::{apply_euler, euler_step, grad_blocks, GradState};
pub use run::{run_observed, run_trajectory, RunError, TrainConfig};
pub use trace::{Retention, StepRecord, Trace, TRACE_SCHEMA_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Block learning rates. `gamma0` multiplies every rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    pub eta0: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub eta_r: f64,
    pub eta_b: f64,
    #[serde(default = "one")]
    pub gamma0: f64,
}

fn one() -> f64 {
    1.0
}

impl LearningRates {
    pub fn uniform(eta: f64) -> Self {
        LearningRates { eta0: eta, eta1: eta, eta2: eta, eta3: eta, eta_r: eta, eta_b: eta, gamma0: 1.0 }
    }

    /// Rates in block order (W0, W1, W2, w3, r, b) including `gamma0`.
    pub fn effective(&self) -> [f64; 6] {
        [self.eta0, self.eta1, self.eta2, self.eta3, self.eta_r, self.eta_b].map(|e| e * self.gamma0)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.eta0, self.eta1, self.eta2, self.eta3, self.eta_r, self.eta_b, self.gamma0];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config("learning rates must be finite and non-negative"));
        }
        Ok(())
    }
}

/// How the expert biases move.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum BiasMode {
    /// Gradient flow with rate `eta_b`.
    #[default]
    Gradient,
    /// Load balancing `b ← b − η Δt (Load − κ)`.
    Balance { eta_bias: f64 },
    Frozen,
}

/// Block names accepted by the telescoping checks.
pub const BLOCKS: [&str; 6] = ["w0", "w1", "w2", "w3", "r", "b"];
