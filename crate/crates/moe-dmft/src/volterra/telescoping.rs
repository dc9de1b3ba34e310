use super::{Kahan, ResidualReport, Tolerance};
use crate::dynamics::{grad_blocks, BiasMode, Retention, Trace};
use crate::error::{Error, Result};
use crate::model::ParamState;

fn flatten(ps: &ParamState, block: &str) -> Vec<f64> {
    let cat = |ms: &[nalgebra::DMatrix<f64>]| ms.iter().flat_map(|m| m.iter().copied()).collect();
    match block {
        "w0" => ps.w0.iter().copied().collect(),
        "w1" => cat(&ps.w1),
        "w2" => cat(&ps.w2),
        "w3" => ps.w3.iter().copied().collect(),
        "r" => ps.r.iter().copied().collect(),
        _ => ps.b.iter().copied().collect(),
    }
}

/// Residual of `θⁿ − θ⁰ − Δt Σ_{m<n} Gᵐ` for one block.
///
/// `block` is one of `w0`, `w1`, `w2`, `w3`, `r`, `b`, or `b-balance`, which
/// is `b` restricted to traces trained with the load-balancing rule.
pub fn check_telescoping(trace: &Trace, block: &str, tol: Tolerance) -> Result<ResidualReport> {
    if !crate::dynamics::BLOCKS.contains(&block) && block != "b-balance" {
        return Err(Error::config(format!("unknown parameter block `{block}`")));
    }
    if block == "b-balance" && !matches!(trace.bias, BiasMode::Balance { .. }) {
        return Err(Error::Capability("trace was not trained with bias balancing".into()));
    }
    trace.require(Retention::Full)?;
    let model = &trace.model;
    let dims = &model.dims;
    let steps = trace.len().saturating_sub(1);
    let eta = trace.lrs.effective();
    let dt = dims.dt;
    let mut rep = ResidualReport::new(format!("telescoping:{block}"), tol.for_steps(steps));

    let theta0 = flatten(trace.params(0)?, block);
    let mut acc = Kahan::new(theta0.clone());
    for n in 0..=steps {
        let theta = flatten(trace.params(n)?, block);
        for (i, &v) in theta.iter().enumerate() {
            rep.record(i, n, v, acc.get(i));
        }
        if n == steps {
            break;
        }
        let increment: Vec<f64> = match (block, trace.bias) {
            ("b" | "b-balance", BiasMode::Balance { eta_bias }) => {
                let rate = eta_bias * trace.lrs.gamma0 * dt;
                trace.records[n].loads.iter().map(|l| -rate * (l - dims.kappa)).collect()
            }
            ("b", BiasMode::Frozen) => vec![0.0; theta.len()],
            _ => {
                let gr = grad_blocks(model, trace.params(n)?, &trace.data, trace.fields(n)?)?;
                let idx = crate::dynamics::BLOCKS.iter().position(|b| *b == block).unwrap();
                let s = eta[idx] * dt;
                flatten(&gr, block).into_iter().map(|g| -(s * g)).collect()
            }
        };
        for (i, v) in increment.into_iter().enumerate() {
            acc.add(i, v);
        }
    }
    Ok(rep)
}
