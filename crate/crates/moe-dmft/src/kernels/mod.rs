//! Particle states, two-time correlation kernels, gated mixture kernels and
//! a bounded-Lipschitz distance estimator.
//!
//! Kernels are indexed by datum pairs `(μ, ν)` and a pair of positions on a
//! time grid. Storage is one `(nt·P) × (nt·P)` matrix with flat index
//! `t·P + μ`.

mod compute;
mod dbl;
mod states;

pub use compute::{expert_kernels, gamma_fields, global_kernels, mixture_kernels, Frames, GammaFields, Mixtures};
pub use dbl::{dbl_estimate, DBL_MAX_ANCHORS};
pub use states::{extract_states, level_snapshot, LevelStates};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which steps a kernel is sampled at: every step up to `dense_until`, then
/// powers of two, then the final step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelGrid {
    pub dense_until: usize,
}

impl Default for KernelGrid {
    fn default() -> Self {
        KernelGrid { dense_until: 64 }
    }
}

impl KernelGrid {
    pub fn every_step() -> Self {
        KernelGrid { dense_until: usize::MAX }
    }

    pub fn times(&self, steps: usize) -> Vec<usize> {
        let mut t: Vec<usize> = (0..=steps.min(self.dense_until)).collect();
        let mut next = self.dense_until.checked_add(1).and_then(usize::checked_next_power_of_two);
        while let Some(v) = next.filter(|&v| v <= steps) {
            t.push(v);
            next = v.checked_mul(2);
        }
        if *t.last().unwrap() != steps {
            t.push(steps);
        }
        t
    }
}

/// `K_{μν}[t, t']` on a time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoTimeKernel {
    pub tag: String,
    pub p: usize,
    /// Step index of each grid position.
    pub times: Vec<usize>,
    pub mat: DMatrix<f64>,
}

impl TwoTimeKernel {
    pub fn new(tag: impl Into<String>, p: usize, times: Vec<usize>, mat: DMatrix<f64>) -> Result<Self> {
        let dim = p * times.len();
        if mat.shape() != (dim, dim) {
            return Err(Error::Shape(format!("kernel matrix {:?}, expected {dim}×{dim}", mat.shape())));
        }
        Ok(TwoTimeKernel { tag: tag.into(), p, times, mat })
    }

    pub fn nt(&self) -> usize {
        self.times.len()
    }

    /// Entry at grid positions `(i, j)`.
    pub fn get(&self, mu: usize, nu: usize, i: usize, j: usize) -> f64 {
        self.mat[(i * self.p + mu, j * self.p + nu)]
    }

    /// Grid position of step `n`.
    pub fn position(&self, n: usize) -> Result<usize> {
        self.times
            .binary_search(&n)
            .map_err(|_| Error::Index(format!("step {n} is not on the kernel grid of `{}`", self.tag)))
    }

    /// Entry at steps `(n, n')`.
    pub fn at(&self, mu: usize, nu: usize, n: usize, np: usize) -> Result<f64> {
        Ok(self.get(mu, nu, self.position(n)?, self.position(np)?))
    }

    /// P×P slice `K[t_i, t_j]`.
    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        self.mat.view((i * self.p, j * self.p), (self.p, self.p)).into_owned()
    }

    /// Equal-time diagonal `K_{μμ}[t, t]` as a P×nt matrix.
    pub fn diagonal(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.p, self.nt(), |mu, i| self.get(mu, mu, i, i))
    }

    /// `max |K − Kᵀ|`.
    pub fn symmetry_error(&self) -> f64 {
        (&self.mat - self.mat.transpose()).amax()
    }

    /// Smallest eigenvalue over all equal-time slices.
    pub fn min_equal_time_eigenvalue(&self) -> f64 {
        (0..self.nt())
            .map(|i| SymmetricEigen::new(self.block(i, i)).eigenvalues.min())
            .fold(f64::INFINITY, f64::min)
    }

    /// Flat rows `(tag, μ, ν, n, n', value)`.
    pub fn rows(&self) -> impl Iterator<Item = (&str, usize, usize, usize, usize, f64)> + '_ {
        let (p, nt) = (self.p, self.nt());
        (0..nt * nt * p * p).map(move |idx| {
            let (ij, mn) = (idx / (p * p), idx % (p * p));
            let (i, j, mu, nu) = (ij / nt, ij % nt, mn / p, mn % p);
            (self.tag.as_str(), mu, nu, self.times[i], self.times[j], self.get(mu, nu, i, j))
        })
    }

    /// Same kernel with every entry multiplied by `c`.
    pub fn scaled(&self, c: f64, tag: impl Into<String>) -> Self {
        TwoTimeKernel { tag: tag.into(), p: self.p, times: self.times.clone(), mat: &self.mat * c }
    }
}

/// One-time mixture `M_μ[t]`, stored P×nt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneTimeMixture {
    pub tag: String,
    pub times: Vec<usize>,
    pub vals: DMatrix<f64>,
}

impl OneTimeMixture {
    pub fn get(&self, mu: usize, i: usize) -> f64 {
        self.vals[(mu, i)]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, usize, usize, usize, usize, f64)> + '_ {
        let p = self.vals.nrows();
        (0..p * self.times.len()).map(move |idx| {
            let (i, mu) = (idx / p, idx % p);
            (self.tag.as_str(), mu, mu, self.times[i], self.times[i], self.vals[(mu, i)])
        })
    }
}
