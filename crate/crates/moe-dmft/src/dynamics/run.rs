use std::fmt;

use super::trace::{Retention, StepRecord, Trace, TRACE_SCHEMA_VERSION};
use super::{apply_euler, bias_balance_step, expert_loads, grad_blocks, BiasMode, LearningRates};
use crate::error::Error;
use crate::model::{init_params, Dataset, FieldState, InitScheme, LossKind, Model, ParamState};

/// Fields larger than this abort a run.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Everything that determines one trajectory.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: Model,
    pub data: Dataset,
    pub init: InitScheme,
    pub lrs: LearningRates,
    pub bias: BiasMode,
    pub loss: LossKind,
    pub seed: u64,
    pub retention: Retention,
    /// Start from this state instead of sampling one.
    pub initial: Option<ParamState>,
}

impl TrainConfig {
    pub fn new(model: Model, data: Dataset, lrs: LearningRates) -> Self {
        TrainConfig {
            model,
            data,
            init: InitScheme::unit(),
            lrs,
            bias: BiasMode::Gradient,
            loss: LossKind::HalfMse,
            seed: 0,
            retention: Retention::Full,
            initial: None,
        }
    }
}

/// A failed run, with whatever was recorded before the failure.
pub enum RunError {
    Config(Error),
    Diverged { step: usize, reason: String, partial: Box<Trace> },
}

impl fmt::Debug for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "Config({e:?})"),
            RunError::Diverged { step, reason, partial } => {
                write!(f, "Diverged {{ step: {step}, reason: {reason:?}, recorded: {} }}", partial.len())
            }
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "{e}"),
            RunError::Diverged { step, reason, .. } => write!(f, "divergence at step {step}: {reason}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<RunError> for Error {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(e) => e,
            RunError::Diverged { step, reason, .. } => Error::Divergence { step, reason },
        }
    }
}

/// Run gradient flow and record a trace.
pub fn run_trajectory(cfg: &TrainConfig) -> Result<Trace, RunError> {
    run_observed(cfg, |_, _, _| {})
}

/// As [`run_trajectory`], calling `observe(n, θⁿ, fieldsⁿ)` at every step.
pub fn run_observed<F>(cfg: &TrainConfig, mut observe: F) -> Result<Trace, RunError>
where
    F: FnMut(usize, &ParamState, &FieldState),
{
    let model = &cfg.model;
    let dims = &model.dims;
    dims.validate(model.gate).map_err(RunError::Config)?;
    cfg.lrs.validate().map_err(RunError::Config)?;
    let mut ps = match &cfg.initial {
        Some(p) => {
            p.check_shapes(dims).map_err(RunError::Config)?;
            p.clone()
        }
        None => init_params(dims, &cfg.init, cfg.seed).map_err(RunError::Config)?,
    };

    // Gradient-trained biases use eta_b; the other modes handle b separately.
    let mut step_lrs = cfg.lrs.clone();
    if cfg.bias != BiasMode::Gradient {
        step_lrs.eta_b = 0.0;
    }

    let mut trace = Trace {
        schema_version: TRACE_SCHEMA_VERSION,
        model: model.clone(),
        data: cfg.data.clone(),
        lrs: cfg.lrs.clone(),
        bias: cfg.bias,
        loss_kind: cfg.loss.clone(),
        retention: cfg.retention,
        init: ps.clone(),
        records: Vec::with_capacity(dims.steps + 1),
    };
    let diverged = |trace: Trace, step: usize, reason: String| RunError::Diverged { step, reason, partial: Box::new(trace) };

    for n in 0..=dims.steps {
        let fs = match model.evaluate(&ps, &cfg.data, &cfg.loss) {
            Ok(fs) => fs,
            Err(e) => return Err(diverged(trace, n, e.to_string())),
        };
        let peak = fs.max_abs();
        if peak > DIVERGENCE_LIMIT {
            return Err(diverged(trace, n, format!("field magnitude {peak:.3e} exceeds {DIVERGENCE_LIMIT:.0e}")));
        }
        observe(n, &ps, &fs);
        let loads = expert_loads(&fs.w, &fs.active, model.gate);
        let grads = if n < dims.steps {
            match grad_blocks(model, &ps, &cfg.data, &fs) {
                Ok(g) => Some(g),
                Err(e) => return Err(diverged(trace, n, e.to_string())),
            }
        } else {
            None
        };
        trace.records.push(StepRecord {
            step: n,
            time: n as f64 * dims.dt,
            loss: fs.loss,
            drive: fs.drive.clone(),
            loads: loads.clone(),
            norms: ps.block_norms(),
            params: (cfg.retention == Retention::Full).then(|| ps.clone()),
            fields: (cfg.retention != Retention::Summary).then_some(fs),
        });
        let Some(grads) = grads else { break };
        if let Err(e) = apply_euler(&mut ps, &grads, &step_lrs, dims.dt, n) {
            return Err(diverged(trace, n, e.to_string()));
        }
        if let BiasMode::Balance { eta_bias } = cfg.bias {
            ps.b = bias_balance_step(&ps.b, &loads, dims.kappa, eta_bias * cfg.lrs.gamma0, dims.dt);
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activations, GateMode, ModelDims};

    fn cfg(steps: usize, eta: f64) -> TrainConfig {
        let dims = ModelDims::new(2, 6, 3, 4, 3).with_steps(steps, 1e-3);
        let model = Model::new(dims, Activations::default(), GateMode::Soft).unwrap();
        TrainConfig::new(model, Dataset::probe_task(2, 3, 5), LearningRates::uniform(eta))
    }

    #[test]
    fn zero_steps_keep_only_the_initial_snapshot() {
        let t = run_trajectory(&cfg(0, 1.0)).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.params(0).unwrap(), &t.init);
    }

    #[test]
    fn frozen_rates_keep_the_loss_constant() {
        let t = run_trajectory(&cfg(10, 0.0)).unwrap();
        let l = t.losses();
        assert!(l.iter().all(|&v| v == l[0]));
    }

    #[test]
    fn small_steps_descend() {
        let t = run_trajectory(&cfg(50, 1.0)).unwrap();
        let l = t.losses();
        assert!(l.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(l[50] < l[0]);
    }

    #[test]
    fn deterministic_given_config() {
        let a = run_trajectory(&cfg(5, 1.0)).unwrap();
        let b = run_trajectory(&cfg(5, 1.0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn snapshots_reproduce_fields() {
        let c = cfg(4, 1.0);
        let t = run_trajectory(&c).unwrap();
        for n in 0..=4 {
            let fs = c.model.evaluate(t.params(n).unwrap(), &c.data, &c.loss).unwrap();
            assert_eq!(&fs, t.fields(n).unwrap());
        }
    }

    #[test]
    fn divergence_keeps_partial_trace() {
        let mut c = cfg(200, 1.0);
        c.model.dims.dt = 1.0;
        c.lrs = LearningRates::uniform(1e7);
        match run_trajectory(&c) {
            Err(RunError::Diverged { step, partial, .. }) => {
                assert!(step > 0);
                assert!(partial.len() == step || partial.len() == step + 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn binary_snapshot_round_trip() {
        let t = run_trajectory(&cfg(3, 1.0)).unwrap();
        let mut buf = Vec::new();
        t.write_binary(&mut buf).unwrap();
        let back = Trace::read_binary(buf.as_slice()).unwrap();
        assert_eq!(back, t);
        assert!(Trace::read_binary(&b"XXXX0000"[..]).is_err());
    }
}
