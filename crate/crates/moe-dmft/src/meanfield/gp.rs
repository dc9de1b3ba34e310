use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::seed::{self, StreamRng};

/// Relative jitter levels tried, in order, for a non-positive pivot.
pub const JITTER_LADDER: [f64; 5] = [1e-12, 1e-11, 1e-10, 1e-9, 1e-8];

/// Lower Cholesky factor of a symmetric PSD matrix.
///
/// Rows that are exactly zero get a zero row and column. The remaining
/// block is factored with each diagonal entry inflated by `ε · |k_ii|`, `ε`
/// climbing [`JITTER_LADDER`] until the factorization succeeds; past the
/// last level the matrix is reported as ill-conditioned. Row `i` of a
/// Cholesky factor reads only `k[..=i, ..=i]`, so at a given jitter level
/// samples at index `i` never depend on later entries.
pub fn psd_cholesky(k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = k.nrows();
    if k.ncols() != n {
        return Err(Error::Shape(format!("covariance is {}×{}", n, k.ncols())));
    }
    let live: Vec<usize> = (0..n).filter(|&i| k.row(i).iter().any(|&v| v != 0.0)).collect();
    let mut l = DMatrix::<f64>::zeros(n, n);
    if live.is_empty() {
        return Ok(l);
    }
    let sub = DMatrix::from_fn(live.len(), live.len(), |a, b| k[(live[a], live[b])]);
    if sub.iter().any(|v| !v.is_finite()) {
        return Err(Error::Conditioning("non-finite covariance entry".into()));
    }
    let scale = sub.diagonal().iter().map(|v| v.abs()).fold(0.0, f64::max);
    let factor = JITTER_LADDER
        .iter()
        .find_map(|eps| {
            let mut m = sub.clone();
            for i in 0..live.len() {
                m[(i, i)] += eps * sub[(i, i)].abs().max(f64::MIN_POSITIVE);
            }
            m.cholesky().map(|c| c.l())
        })
        .ok_or_else(|| {
            Error::Conditioning(format!(
                "no Cholesky factor with relative jitter up to {:.0e} (largest variance {scale:.3e})",
                JITTER_LADDER[JITTER_LADDER.len() - 1]
            ))
        })?;
    for (a, &i) in live.iter().enumerate() {
        for (b, &j) in live.iter().enumerate().take(a + 1) {
            l[(i, j)] = factor[(a, b)];
        }
    }
    Ok(l)
}

/// `m` draws from `N(0, L Lᵀ)`, one per row.
pub fn sample_rows(l: &DMatrix<f64>, m: usize, rng: &mut StreamRng) -> DMatrix<f64> {
    let mut z = DMatrix::<f64>::zeros(m, l.nrows());
    seed::fill_normal(rng, z.as_mut_slice());
    z * l.transpose()
}

/// `m` rows whose sample mean is zero and sample covariance is exactly
/// `L Lᵀ` (needs `m > dim`).
pub fn sample_rows_matched(l: &DMatrix<f64>, m: usize, rng: &mut StreamRng) -> Result<DMatrix<f64>> {
    let dim = l.nrows();
    if m <= dim {
        return Err(Error::config(format!("moment matching {dim} dimensions needs more than {dim} samples, got {m}")));
    }
    let mut z = DMatrix::<f64>::zeros(m, dim);
    seed::fill_normal(rng, z.as_mut_slice());
    for mut c in z.column_iter_mut() {
        let mean = c.mean();
        c.add_scalar_mut(-mean);
    }
    let cov = z.transpose() * &z / m as f64;
    let r = cov.cholesky().ok_or_else(|| Error::Conditioning("degenerate whitening draw".into()))?;
    let zt = r.l().solve_lower_triangular(&z.transpose()).ok_or_else(|| Error::Conditioning("singular whitening factor".into()))?;
    Ok(zt.transpose() * l.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_psd(n: usize, rank: usize, s: u64) -> DMatrix<f64> {
        let mut rng = seed::stream(s, "psd");
        let mut a = DMatrix::<f64>::zeros(n, rank);
        seed::fill_normal(&mut rng, a.as_mut_slice());
        &a * a.transpose()
    }

    #[test]
    fn full_rank_matches_reference() {
        let k = rand_psd(6, 9, 1);
        let l = psd_cholesky(&k).unwrap();
        let r = k.clone().cholesky().unwrap().l();
        assert!((&l - &r).amax() < 1e-10);
    }

    #[test]
    fn rank_deficient_reconstructs() {
        let k = rand_psd(8, 3, 2);
        let l = psd_cholesky(&k).unwrap();
        assert!((&l * l.transpose() - &k).amax() < 1e-6 * k.amax());
    }

    #[test]
    fn zero_rows_get_zero_columns() {
        let mut k = rand_psd(4, 4, 3);
        for j in 0..4 {
            k[(1, j)] = 0.0;
            k[(j, 1)] = 0.0;
        }
        let l = psd_cholesky(&k).unwrap();
        assert!(l.row(1).iter().all(|&v| v == 0.0));
        assert!(l.column(1).iter().all(|&v| v == 0.0));
        assert!((&l * l.transpose() - &k).amax() < 1e-10);
    }

    #[test]
    fn indefinite_is_a_conditioning_error() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(psd_cholesky(&k), Err(Error::Conditioning(_))));
    }

    #[test]
    fn rows_ignore_later_entries() {
        let k = rand_psd(6, 6, 4);
        let mut k2 = k.clone();
        k2[(5, 5)] += 3.0;
        k2[(4, 5)] += 0.1;
        k2[(5, 4)] += 0.1;
        let (a, b) = (psd_cholesky(&k).unwrap(), psd_cholesky(&k2).unwrap());
        assert_eq!(a.rows(0, 4), b.rows(0, 4));
    }

    #[test]
    fn matched_samples_have_exact_moments() {
        let k = rand_psd(3, 3, 5);
        let l = psd_cholesky(&k).unwrap();
        let x = sample_rows_matched(&l, 50, &mut seed::stream(0, "m")).unwrap();
        let cov = x.transpose() * &x / 50.0;
        assert!((cov - &k).amax() < 1e-10);
        assert!(x.row_mean().amax() < 1e-12);
    }
}
