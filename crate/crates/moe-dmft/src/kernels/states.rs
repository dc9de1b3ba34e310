use nalgebra::DMatrix;

use crate::dynamics::{Retention, Trace};
use crate::error::{Error, Result};
use crate::model::{FieldState, ModelDims, ParamState};

/// Particle states of the three levels at every recorded step, one record
/// per row.
///
/// * `s[n]`: N × (2P+1), residual neuron `i` as `(h0_{·,i}, h3_{·,i}, w3_i)`.
/// * `x[n]`: E × (P+1), expert `k` as `(b_k, p_{k,·})`.
/// * `y[n]`: (E·N_e) × 2P, hidden unit `(k, a)` at row `k·N_e + a` as
///   `(u_{k,·,a}, z_{k,·,a})`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelStates {
    pub s: Vec<DMatrix<f64>>,
    pub x: Vec<DMatrix<f64>>,
    pub y: Vec<DMatrix<f64>>,
}

impl LevelStates {
    /// Record dimensions `(2P+1, P+1, 2P)`.
    pub fn record_dims(p: usize) -> (usize, usize, usize) {
        (2 * p + 1, p + 1, 2 * p)
    }

    /// Records of one level at step `n` as vectors, for empirical-measure
    /// comparisons.
    pub fn records(&self, level: char, n: usize) -> Vec<Vec<f64>> {
        let m = match level {
            'S' => &self.s[n],
            'X' => &self.x[n],
            _ => &self.y[n],
        };
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

/// Coordinate projections of the full snapshots in `trace`.
pub fn extract_states(trace: &Trace) -> Result<LevelStates> {
    trace.require(Retention::Full)?;
    let mut out = LevelStates { s: Vec::new(), x: Vec::new(), y: Vec::new() };
    for n in 0..trace.len() {
        let (ps, fs) = (trace.params(n)?, trace.fields(n)?);
        for (level, dst) in [('S', &mut out.s), ('X', &mut out.x), ('Y', &mut out.y)] {
            dst.push(level_snapshot(&trace.model.dims, ps, fs, level)?);
        }
    }
    Ok(out)
}

/// One level's records (`'S'`, `'X'` or `'Y'`) from a single snapshot.
pub fn level_snapshot(d: &ModelDims, ps: &ParamState, fs: &FieldState, level: char) -> Result<DMatrix<f64>> {
    let p = d.p;
    let (ds, dx, dy) = LevelStates::record_dims(p);
    Ok(match level {
        'S' => DMatrix::from_fn(d.n, ds, |i, c| match c {
            c if c < p => fs.h0[(i, c)],
            c if c < 2 * p => fs.h3[(i, c - p)],
            _ => ps.w3[i],
        }),
        'X' => DMatrix::from_fn(d.e, dx, |k, c| if c == 0 { ps.b[k] } else { fs.p[(k, c - 1)] }),
        'Y' => DMatrix::from_fn(d.e * d.n_e, dy, |row, c| {
            let (k, a) = (row / d.n_e, row % d.n_e);
            if c < p {
                fs.u[k][(a, c)]
            } else {
                fs.z[k][(a, c - p)]
            }
        }),
        other => return Err(Error::config(format!("unknown level `{other}`; expected S, X or Y"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{run_trajectory, LearningRates, TrainConfig};
    use crate::model::{Activations, Dataset, GateMode, Model, ModelDims};

    fn run(dims: ModelDims, retention: Retention) -> Trace {
        let model = Model::new(dims.clone(), Activations::default(), GateMode::Soft).unwrap();
        let mut cfg = TrainConfig::new(model, Dataset::probe_task(dims.d, dims.p, 2), LearningRates::uniform(1.0));
        cfg.retention = retention;
        run_trajectory(&cfg).unwrap()
    }

    #[test]
    fn record_dims_for_three_data() {
        assert_eq!(LevelStates::record_dims(3), (7, 4, 6));
        let t = run(ModelDims::new(2, 5, 2, 3, 3).with_steps(2, 0.1), Retention::Full);
        let st = extract_states(&t).unwrap();
        assert_eq!(st.s.len(), 3);
        assert_eq!(st.s[0].shape(), (5, 7));
        assert_eq!(st.x[0].shape(), (2, 4));
        assert_eq!(st.y[0].shape(), (6, 6));
        assert_eq!(st.records('Y', 1).len(), 6);
    }

    #[test]
    fn single_neuron_projection() {
        let t = run(ModelDims::new(1, 1, 1, 1, 1).with_steps(1, 0.1), Retention::Full);
        let st = extract_states(&t).unwrap();
        let (ps, fs) = (t.params(1).unwrap(), t.fields(1).unwrap());
        assert_eq!(st.s[1].row(0).iter().copied().collect::<Vec<_>>(), vec![fs.h0[(0, 0)], fs.h3[(0, 0)], ps.w3[0]]);
        assert_eq!(st.x[1][(0, 0)], ps.b[0]);
        assert_eq!(st.y[1][(0, 1)], fs.z[0][(0, 0)]);
    }

    #[test]
    fn needs_full_snapshots() {
        let t = run(ModelDims::new(1, 2, 1, 1, 1).with_steps(1, 0.1), Retention::Fields);
        assert!(extract_states(&t).is_err());
    }
}
