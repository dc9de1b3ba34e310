//! Width parameterizations, size/seed sweeps, concentration-rate fits and
//! loss-curve collapse.
//!
//! A [`Parameterization`] lists, per block, how the effective weight scale
//! and the effective learning rate grow with the residual width `N`, the
//! expert width ratio `α = N_e/N` and the expert count `E`. Effective means
//! the weight as it enters the forward pass (`W0/√D`, `W1/√N`, `W2/√N_e`,
//! `w3/N`, `N^{-γ} r`, `b`), so the table reads the same whatever the fixed
//! multipliers are. [`apply_parameterization`] converts back to the stored
//! weights: a multiplier `c` divides the standard deviation by `c` and the
//! learning rate by `c²`.

mod fit;
mod limit;
mod sweep;

pub use fit::{collapse_metric, concentration_fit, concentration_fit_group, log_log_fit, sample_std, RateFit};
pub use limit::{classify_growth, classify_limit, GrowthLaw, Regime};
pub use sweep::{lr_grid, run_lr_scan, run_sweep, CellResult, KernelProbe, StateProbe, SweepBase, SweepPlan, SweepReport};

use serde::{Deserialize, Serialize};

use crate::dynamics::LearningRates;
use crate::error::{Error, Result};
use crate::meanfield::MeanFieldRates;
use crate::model::{GateMode, InitScheme, ModelDims};

/// Exponents of one block. `init` is over `(N, α)`; `None` means the block
/// starts at zero. `lr` is over `(N, α, E)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockRule {
    pub init: Option<[f64; 2]>,
    pub lr: [f64; 3],
}

impl BlockRule {
    const fn new(init: [f64; 2], lr: [f64; 3]) -> Self {
        BlockRule { init: Some(init), lr }
    }
}

/// Effective-weight exponents in block order (W0, W1, W2, w3, r, b).
///
/// The router init exponent is stored for `γ = 1` and multiplied by the
/// dims' `γ` when applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Parameterization {
    pub name: String,
    pub blocks: [BlockRule; 6],
}

pub const SCHEMES: [&str; 5] = ["moe-table", "ntk-baseline", "fan-in", "mean-field", "moe-table-adam"];

impl Parameterization {
    /// Built-in scheme by name.
    ///
    /// * `moe-table`: gradient-flow form of the mixture-of-experts table. The
    ///   expert and gate rates carry the `E` that cancels the `1/E` of the
    ///   expert average.
    /// * `ntk-baseline` (alias `fan-in`): as `moe-table` but the down
    ///   projection keeps its fan-in scale `N_e^{-1/2}`.
    /// * `mean-field`: the rates of [`mean_field_rates`], fan-in down
    ///   projection, and a bias that keeps its base scale. This is the
    ///   finite-size counterpart of the mean-field solver.
    /// * `moe-table-adam`: the table's adaptive-optimizer learning rates,
    ///   kept for reference. Plain gradient flow with these rates does not
    ///   have a width limit.
    pub fn named(name: &str) -> Result<Self> {
        let table = [
            BlockRule::new([0.0, 0.0], [1.0, 0.0, 0.0]),
            BlockRule::new([-0.5, 0.0], [0.0, 1.0, 1.0]),
            BlockRule::new([-0.5, -1.0], [0.0, -1.0, 1.0]),
            BlockRule::new([-1.0, 0.0], [-1.0, 0.0, 0.0]),
            BlockRule::new([-1.0, 0.0], [-1.0, 0.0, 1.0]),
            BlockRule { init: None, lr: [0.0, 0.0, 1.0] },
        ];
        let blocks = match name {
            "moe-table" => table,
            "ntk-baseline" | "fan-in" => {
                let mut b = table;
                b[2].init = Some([-0.5, -0.5]);
                b
            }
            "mean-field" => {
                let mut b = table;
                b[1].lr = [0.0, 0.5, 1.0];
                b[2].init = Some([-0.5, -0.5]);
                b[5].init = Some([0.0, 0.0]);
                b
            }
            "moe-table-adam" => [
                BlockRule::new([0.0, 0.0], [0.0, 0.0, 0.0]),
                BlockRule::new([-0.5, 0.0], [-1.0, 0.0, 0.0]),
                BlockRule::new([-0.5, -1.0], [-1.0, -1.0, 0.0]),
                BlockRule::new([-1.0, 0.0], [-1.0, 0.0, 0.0]),
                BlockRule::new([-1.0, 0.0], [-1.0, 0.0, 0.0]),
                BlockRule { init: None, lr: [0.0, 0.0, 0.0] },
            ],
            other => {
                return Err(Error::config(format!("unknown parameterization `{other}`; known: {}", SCHEMES.join(", "))))
            }
        };
        Ok(Parameterization { name: name.to_string(), blocks })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.blocks.iter().all(|b| b.lr.iter().chain(b.init.iter().flatten()).all(|v| v.is_finite()));
        if !ok {
            return Err(Error::config(format!("parameterization `{}` has non-finite exponents", self.name)));
        }
        Ok(())
    }
}

/// Base values: stored-weight standard deviations and rates at `N = α = E = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseHyper {
    pub init: InitScheme,
    pub lrs: LearningRates,
}

impl Default for BaseHyper {
    fn default() -> Self {
        BaseHyper { init: InitScheme::unit(), lrs: LearningRates::uniform(1.0) }
    }
}

/// Forward multiplier exponents of each block in `(N, α)`, width-dependent
/// part only.
fn multiplier_exponents(gamma: f64) -> [[f64; 2]; 6] {
    [[0.0, 0.0], [-0.5, 0.0], [-0.5, -0.5], [-1.0, 0.0], [-gamma, 0.0], [0.0, 0.0]]
}

/// Router init follows `γ` in the table; the stored router is unit scale.
fn effective_init(rule: &BlockRule, block: usize, gamma: f64) -> Option<[f64; 2]> {
    rule.init.map(|mut e| {
        if block == 4 {
            e[0] *= gamma;
        }
        e
    })
}

fn pow(dims: &ModelDims, e: [f64; 3]) -> f64 {
    (dims.n as f64).powf(e[0]) * dims.alpha().powf(e[1]) * (dims.e as f64).powf(e[2])
}

fn get6(s: &InitScheme) -> [f64; 6] {
    [s.s0, s.s1, s.s2, s.s3, s.sr, s.sb]
}

fn rates6(l: &LearningRates) -> [f64; 6] {
    [l.eta0, l.eta1, l.eta2, l.eta3, l.eta_r, l.eta_b]
}

fn scheme_from(v: [f64; 6]) -> InitScheme {
    InitScheme { s0: v[0], s1: v[1], s2: v[2], s3: v[3], sr: v[4], sb: v[5] }
}

fn rates_from(v: [f64; 6], gamma0: f64) -> LearningRates {
    LearningRates { eta0: v[0], eta1: v[1], eta2: v[2], eta3: v[3], eta_r: v[4], eta_b: v[5], gamma0 }
}

/// Stored-weight init scheme and rates for `dims`.
///
/// Block `i` gets `std = base.std_i · N^{a-c}·α^{b-c'}` and
/// `η = base.η_i · N^{x-2c}·α^{y-2c'}·E^z`, where `(a, b)` and `(x, y, z)` are
/// the effective exponents and `(c, c')` those of the block's multiplier.
/// Blocks with no init exponent start at zero.
pub fn apply_parameterization(base: &BaseHyper, dims: &ModelDims, pz: &Parameterization) -> Result<(InitScheme, LearningRates)> {
    dims.validate(GateMode::Soft)?;
    pz.validate()?;
    base.init.validate()?;
    base.lrs.validate()?;
    let mult = multiplier_exponents(dims.gamma);
    let (s, l) = (get6(&base.init), rates6(&base.lrs));
    let mut std = [0.0; 6];
    let mut eta = [0.0; 6];
    for i in 0..6 {
        let m = mult[i];
        let rule = &pz.blocks[i];
        std[i] = match effective_init(rule, i, dims.gamma) {
            Some(e) => s[i] * pow(dims, [e[0] - m[0], e[1] - m[1], 0.0]),
            None => 0.0,
        };
        eta[i] = l[i] * pow(dims, [rule.lr[0] - 2.0 * m[0], rule.lr[1] - 2.0 * m[1], rule.lr[2]]);
    }
    Ok((scheme_from(std), rates_from(eta, base.lrs.gamma0)))
}

/// Effective (forward-pass) weight scales and rates, the quantities the
/// table constrains. Fixed multipliers such as `1/√D` are included.
pub fn effective_values(init: &InitScheme, lrs: &LearningRates, dims: &ModelDims) -> ([f64; 6], [f64; 6]) {
    let n = dims.n as f64;
    let c = [
        1.0 / (dims.d as f64).sqrt(),
        1.0 / n.sqrt(),
        1.0 / (dims.n_e as f64).sqrt(),
        1.0 / n,
        n.powf(-dims.gamma),
        1.0,
    ];
    let (s, l) = (get6(init), rates6(lrs));
    (std::array::from_fn(|i| s[i] * c[i]), std::array::from_fn(|i| l[i] * c[i] * c[i]))
}

/// Finite-width rates whose width-free coefficients are `c`:
/// `η0 = c0 N`, `η1 = c1 E √(N N_e)`, `η2 = c2 E N`, `η3 = c3 N`,
/// `η_r = c_r E N^{2γ-1}`, `η_b = c_b E`.
///
/// At fixed `α` these are the `moe-table` rates up to the constant `√α` in
/// `η1`, which the mean-field equations keep explicit.
pub fn mean_field_rates(c: &MeanFieldRates, dims: &ModelDims) -> LearningRates {
    let (n, e) = (dims.n as f64, dims.e as f64);
    LearningRates {
        eta0: c.c0 * n,
        eta1: c.c1 * e * (n * dims.n_e as f64).sqrt(),
        eta2: c.c2 * e * n,
        eta3: c.c3 * n,
        eta_r: c.c_r * e * n.powf(2.0 * dims.gamma - 1.0),
        eta_b: c.c_b * e,
        gamma0: c.gamma0,
    }
}
