//! Exact identities of Euler-trained trajectories.
//!
//! Telescoping: every parameter block satisfies
//! `θⁿ = θ⁰ + Δt Σ_{m<n} Gᵐ` with `Gᵐ` the update direction at step `m`.
//! Volterra: every field equals its value under the initial parameters plus a
//! history sum of kernel-weighted training signals, e.g.
//!
//! ```text
//! f_ν(n) = ⟨w3(0), φ(h3_ν(n))⟩/N + Δt Σ_{m<n} η3 ⟨Δ_μ(m) H3_μν(m, n)⟩_μ / N
//! ```
//!
//! Both are recomputed from the trace itself with compensated summation.

mod fields;
mod telescoping;

pub use fields::check_volterra_field;
pub use telescoping::check_telescoping;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{BiasMode, Trace};
use crate::error::Result;

pub const FIELDS: [&str; 5] = ["h0", "u", "m", "p", "f"];

/// Absolute tolerance `per_step · √max(steps, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub per_step: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance { per_step: 1e-10 }
    }
}

impl Tolerance {
    pub fn for_steps(&self, steps: usize) -> f64 {
        self.per_step * (steps.max(1) as f64).sqrt()
    }
}

/// Worst violation of one identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub identity: String,
    pub max_abs: f64,
    pub max_rel: f64,
    /// Flat entry index and step of the largest absolute residual.
    pub worst_index: usize,
    pub worst_step: usize,
    pub tolerance: f64,
}

impl ResidualReport {
    fn new(identity: impl Into<String>, tolerance: f64) -> Self {
        ResidualReport { identity: identity.into(), max_abs: 0.0, max_rel: 0.0, worst_index: 0, worst_step: 0, tolerance }
    }

    fn record(&mut self, index: usize, step: usize, actual: f64, predicted: f64) {
        let r = (actual - predicted).abs();
        let r = if r.is_nan() { f64::INFINITY } else { r };
        if r > self.max_abs {
            self.max_abs = r;
            self.worst_index = index;
            self.worst_step = step;
        }
        self.max_rel = self.max_rel.max(r / actual.abs().max(1e-12));
    }

    pub fn passed(&self) -> bool {
        self.max_abs <= self.tolerance
    }
}

/// Kahan-compensated running sums over a fixed number of slots.
#[derive(Clone, Debug)]
pub(crate) struct Kahan {
    sum: Vec<f64>,
    comp: Vec<f64>,
}

impl Kahan {
    pub(crate) fn new(init: Vec<f64>) -> Self {
        let n = init.len();
        Kahan { sum: init, comp: vec![0.0; n] }
    }

    #[inline]
    pub(crate) fn add(&mut self, i: usize, v: f64) {
        let y = v - self.comp[i];
        let t = self.sum[i] + y;
        self.comp[i] = (t - self.sum[i]) - y;
        self.sum[i] = t;
    }

    pub(crate) fn get(&self, i: usize) -> f64 {
        self.sum[i]
    }
}

/// Every applicable check: six telescoping blocks (the bias block follows the
/// trace's bias mode) and the five Volterra fields.
pub fn check_all(trace: &Trace, tol: Tolerance) -> Result<Vec<ResidualReport>> {
    let mut names: Vec<(&str, bool)> = crate::dynamics::BLOCKS.iter().map(|b| (*b, true)).collect();
    if matches!(trace.bias, BiasMode::Balance { .. }) {
        names.push(("b-balance", true));
    }
    names.extend(FIELDS.iter().map(|f| (*f, false)));
    names
        .par_iter()
        .map(|&(name, tel)| if tel { check_telescoping(trace, name, tol) } else { check_volterra_field(trace, name, tol) })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_recovers_small_terms() {
        let mut k = Kahan::new(vec![1.0]);
        for _ in 0..1_000_000 {
            k.add(0, 1e-16);
        }
        assert!((k.get(0) - (1.0 + 1e-10)).abs() < 1e-22);
    }

    #[test]
    fn report_tracks_the_worst_entry() {
        let mut r = ResidualReport::new("x", 1e-3);
        r.record(0, 0, 1.0, 1.0);
        r.record(4, 2, 2.0, 2.0 + 1e-4);
        r.record(1, 3, 0.5, 0.5 - 1e-5);
        assert_eq!((r.worst_index, r.worst_step), (4, 2));
        assert!(r.passed());
        r.record(0, 5, f64::NAN, 0.0);
        assert!(!r.passed());
    }

    #[test]
    fn tolerance_grows_with_root_steps() {
        let t = Tolerance::default();
        assert_eq!(t.for_steps(0), 1e-10);
        assert!((t.for_steps(100) - 1e-9).abs() < 1e-24);
    }
}
