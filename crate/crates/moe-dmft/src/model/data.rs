use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Inputs stored column-wise (`x` is D×P), labels, and the input Gram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub kx: DMatrix<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.ncols() != y.len() {
            return Err(Error::Shape(format!("{} inputs but {} labels", x.ncols(), y.len())));
        }
        if x.ncols() == 0 || x.nrows() == 0 {
            return Err(Error::config("dataset must be non-empty"));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::config("dataset contains non-finite values"));
        }
        let kx = x.transpose() * &x;
        Ok(Dataset { x, y, kx })
    }

    pub fn from_rows(xs: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        let d = xs.first().map_or(0, |r| r.len());
        if xs.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged input rows".into()));
        }
        let x = DMatrix::from_fn(d, xs.len(), |i, mu| xs[mu][i]);
        Self::new(x, DVector::from_column_slice(y))
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `p` random unit inputs in `d` dimensions labelled by a degree-2
    /// polynomial teacher `y = v + (v² − 1)/√2`, `v = √d ⟨β, x⟩`.
    pub fn probe_task(d: usize, p: usize, seed: u64) -> Self {
        let mut rng = seed::stream(seed, "data/x");
        let mut x = DMatrix::<f64>::zeros(d, p);
        for mut col in x.column_iter_mut() {
            for v in col.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let n = col.norm();
            col /= n;
        }
        let mut trng = seed::stream(seed, "data/teacher");
        let mut beta = DVector::<f64>::zeros(d);
        for v in beta.iter_mut() {
            *v = StandardNormal.sample(&mut trng);
        }
        beta /= beta.norm();
        let y = DVector::from_fn(p, |mu, _| {
            let v = (d as f64).sqrt() * beta.dot(&x.column(mu));
            v + (v * v - 1.0) / std::f64::consts::SQRT_2
        });
        Self::new(x, y).expect("probe task is well formed")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gram_is_symmetric_psd_with_squared_norms() {
        let ds = Dataset::probe_task(8, 5, 3);
        for mu in 0..5 {
            assert!((ds.kx[(mu, mu)] - ds.x.column(mu).norm_squared()).abs() < 1e-15);
            assert!((ds.kx[(mu, mu)] - 1.0).abs() < 1e-12);
            for nu in 0..5 {
                assert_eq!(ds.kx[(mu, nu)], ds.kx[(nu, mu)]);
            }
        }
        let eig = ds.kx.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l > -1e-12));
    }

    #[test]
    fn probe_task_is_deterministic() {
        assert_eq!(Dataset::probe_task(8, 4, 11), Dataset::probe_task(8, 4, 11));
        assert_ne!(Dataset::probe_task(8, 4, 11).y, Dataset::probe_task(8, 4, 12).y);
    }

    #[test]
    fn rejects_mismatched_labels() {
        assert!(Dataset::from_rows(&[vec![1.0], vec![2.0]], &[1.0]).is_err());
    }
}
