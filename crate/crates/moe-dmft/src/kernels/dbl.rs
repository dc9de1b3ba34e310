use std::cmp::Ordering;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;

/// Largest anchor set used by the cone test functions.
pub const DBL_MAX_ANCHORS: usize = 32;

/// Coordinate ascent runs only when `samples × anchors` is at most this.
const REFINE_BUDGET: usize = 4096;
const REFINE_STARTS: usize = 128;
const REFINE_SWEEPS: usize = 20;

fn lex(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct Problem {
    /// Distances from each sample of A (resp. B) to each anchor.
    da: Vec<Vec<f64>>,
    db: Vec<Vec<f64>>,
    /// Anchor-to-anchor distances.
    dd: Vec<Vec<f64>>,
}

impl Problem {
    fn cone(v: &[f64], row: &[f64]) -> f64 {
        row.iter().zip(v).map(|(d, v)| v + d).fold(f64::INFINITY, f64::min).clamp(-1.0, 1.0)
    }

    fn gap(&self, v: &[f64]) -> f64 {
        let a: Vec<f64> = self.da.iter().map(|r| Self::cone(v, r)).collect();
        let b: Vec<f64> = self.db.iter().map(|r| Self::cone(v, r)).collect();
        (mean(&a) - mean(&b)).abs()
    }

    /// Values of the cone at the anchors, which form a 1-Lipschitz vector.
    fn normalize(&self, v: &[f64]) -> Vec<f64> {
        self.dd.iter().map(|r| Self::cone(v, r)).collect()
    }

    /// Local search over 1-Lipschitz anchor vectors. A move sets `u_j = c`
    /// and clamps every other `u_i` into `[c − d_ij, c + d_ij]`, which keeps
    /// the vector 1-Lipschitz; `c` ranges over the breakpoints
    /// `{±1} ∪ {u_i ± d_ij}`.
    fn refine(&self, v: Vec<f64>, mut best: f64) -> f64 {
        let m = v.len();
        let mut u = self.normalize(&v);
        best = best.max(self.gap(&u));
        let mut trial = u.clone();
        for _ in 0..REFINE_SWEEPS {
            let mut improved = false;
            for j in 0..m {
                let mut cands = vec![-1.0, 1.0];
                for i in 0..m {
                    if i != j {
                        cands.push((u[i] + self.dd[i][j]).clamp(-1.0, 1.0));
                        cands.push((u[i] - self.dd[i][j]).clamp(-1.0, 1.0));
                    }
                }
                let mut pick: Option<Vec<f64>> = None;
                for c in cands {
                    for i in 0..m {
                        trial[i] = u[i].clamp(c - self.dd[i][j], c + self.dd[i][j]);
                    }
                    trial[j] = c;
                    let g = self.gap(&trial);
                    if g > best {
                        best = g;
                        pick = Some(trial.clone());
                    }
                }
                if let Some(p) = pick {
                    u = p;
                    improved = true;
                }
            }
            if !improved {
                break;
            }
        }
        best
    }
}

/// Randomized lower bound on the bounded-Lipschitz distance between the
/// empirical measures of `a` and `b`.
///
/// Every test function is bounded by 1 and 1-Lipschitz, so the returned
/// `max |mean_A ψ − mean_B ψ|` never exceeds the true distance. Half of the
/// `n_test` functions are clamped ridges `clamp(⟨ω, s⟩ + β, −1, 1)` with
/// `‖ω‖ = 1`; the rest are clamped cones `clamp(min_j v_j + ‖s − x_j‖, −1, 1)`
/// over anchors `x_j` drawn from the pooled samples. On small inputs the best
/// cones are then refined by coordinate ascent on the anchor values.
///
/// Samples are sorted first, so the result is symmetric in `a` and `b` and
/// independent of input order.
pub fn dbl_estimate(a: &[Vec<f64>], b: &[Vec<f64>], n_test: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Shape("empty sample set".into()));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|s| s.len() != dim) {
        return Err(Error::Shape("samples differ in dimension".into()));
    }
    let mut a: Vec<&[f64]> = a.iter().map(|s| s.as_slice()).collect();
    let mut b: Vec<&[f64]> = b.iter().map(|s| s.as_slice()).collect();
    a.sort_by(|x, y| lex(x, y));
    b.sort_by(|x, y| lex(x, y));
    if a == b {
        return Ok(0.0);
    }

    let mut pool: Vec<&[f64]> = a.iter().chain(b.iter()).copied().collect();
    pool.sort_by(|x, y| lex(x, y));
    pool.dedup();
    let mut rng = seed::stream(seed, "dbl");
    let anchors: Vec<&[f64]> = if pool.len() <= DBL_MAX_ANCHORS {
        pool.clone()
    } else {
        let mut idx = index::sample(&mut rng, pool.len(), DBL_MAX_ANCHORS).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i]).collect()
    };
    let to_anchors = |s: &&[f64]| anchors.iter().map(|x| dist(s, x)).collect::<Vec<_>>();
    let prob = Problem {
        da: a.iter().map(to_anchors).collect(),
        db: b.iter().map(to_anchors).collect(),
        dd: anchors.iter().map(to_anchors).collect(),
    };

    let mut best = 0.0f64;
    let n_ridge = n_test / 2;
    let mut omega = vec![0.0; dim];
    for _ in 0..n_ridge {
        for w in omega.iter_mut() {
            *w = StandardNormal.sample(&mut rng);
        }
        let norm = omega.iter().map(|w| w * w).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        omega.iter_mut().for_each(|w| *w /= norm);
        let proj = |s: &[f64]| s.iter().zip(&omega).map(|(x, w)| x * w).sum::<f64>();
        let (lo, hi) = pool.iter().map(|s| proj(s)).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        let beta = rng.random_range(-hi - 1.0..=-lo + 1.0);
        let psi = |s: &&[f64]| (proj(s) + beta).clamp(-1.0, 1.0);
        let ma = mean(&a.iter().map(psi).collect::<Vec<_>>());
        let mb = mean(&b.iter().map(psi).collect::<Vec<_>>());
        best = best.max((ma - mb).abs());
    }

    let m = anchors.len();
    let mut starts: Vec<(f64, Vec<f64>)> = Vec::new();
    for t in 0..n_test - n_ridge {
        let v: Vec<f64> = if t % 2 == 0 {
            (0..m).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
        } else {
            (0..m).map(|_| rng.random_range(-1.0..=1.0)).collect()
        };
        let g = prob.gap(&v);
        best = best.max(g);
        if starts.len() < REFINE_STARTS || g > starts.last().unwrap().0 {
            starts.push((g, v));
            starts.sort_by(|x, y| y.0.total_cmp(&x.0));
            starts.truncate(REFINE_STARTS);
        }
    }
    if (a.len() + b.len()) * m <= REFINE_BUDGET {
        for (g, v) in starts {
            best = best.max(prob.refine(v, g));
        }
    }
    Ok(best)
}
