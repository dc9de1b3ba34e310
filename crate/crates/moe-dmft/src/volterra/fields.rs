use nalgebra::DMatrix;

use super::{Kahan, ResidualReport, Tolerance};
use crate::dynamics::{Retention, Trace};
use crate::error::{Error, Result};
use crate::model::FieldState;

fn dot_cols(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    a.column(i).dot(&b.column(j))
}

/// Residual of the Volterra identity for `field ∈ {h0, u, m, p, f}`.
///
/// Each is `field(n) − init(n) − Δt Σ_{m<n} η ⟨c_μ(m) · kernel_μν(m, n)⟩`,
/// where `init(n)` applies the initial parameters to the step-`n` inputs of
/// the layer and the kernel is the Gram object of those inputs (`Kx/D` for
/// `h0`, `H0` for `u` and `p`, `Φ¹ᵏ` for `m`, `H3` for `f`).
pub fn check_volterra_field(trace: &Trace, field: &str, tol: Tolerance) -> Result<ResidualReport> {
    if !super::FIELDS.contains(&field) {
        return Err(Error::config(format!("unknown Volterra field `{field}`")));
    }
    trace.require(Retention::Fields)?;
    let model = &trace.model;
    let d = &model.dims;
    let steps = trace.len().saturating_sub(1);
    let fs: Vec<&FieldState> = (0..=steps).map(|n| trace.fields(n)).collect::<Result<_>>()?;
    let th0 = &trace.init;
    let eta = trace.lrs.effective();
    let (n_f, e_f, p) = (d.n as f64, d.e as f64, d.p);
    let dt = d.dt;
    // Per-datum signal weights c_μ(m) = Δ_μ(m)/P.
    let c = |m: usize, mu: usize| fs[m].drive[mu] / p as f64;
    let phi = &model.act.phi;
    let mut rep = ResidualReport::new(format!("volterra:{field}"), tol.for_steps(steps));

    match field {
        "h0" => {
            let init = (&th0.w0 * &trace.data.x) / (d.d as f64).sqrt();
            let kx = &trace.data.kx / d.d as f64;
            let mut acc = Kahan::new(init.iter().copied().collect());
            for n in 0..=steps {
                for (idx, &v) in fs[n].h0.iter().enumerate() {
                    rep.record(idx, n, v, acc.get(idx));
                }
                for nu in 0..p {
                    for i in 0..d.n {
                        for mu in 0..p {
                            let inc = eta[0] * dt * c(n, mu) * fs[n].q[(i, mu)] * kx[(mu, nu)];
                            acc.add(nu * d.n + i, inc);
                        }
                    }
                }
            }
        }
        "f" => {
            let phis: Vec<DMatrix<f64>> = fs.iter().map(|f| f.h3.map(|v| phi.value(v))).collect();
            for n in 0..=steps {
                for nu in 0..p {
                    let init = th0.w3.dot(&phis[n].column(nu)) / n_f;
                    let mut acc = Kahan::new(vec![init]);
                    for m in 0..n {
                        for mu in 0..p {
                            let h3 = dot_cols(&phis[m], mu, &phis[n], nu) / n_f;
                            acc.add(0, eta[3] * dt * c(m, mu) * h3 / n_f);
                        }
                    }
                    rep.record(nu, n, fs[n].f[nu], acc.get(0));
                }
            }
        }
        "u" | "m" | "p" => {
            let h0_gram = |m: usize, mu: usize, n: usize, nu: usize| dot_cols(&fs[m].h0, mu, &fs[n].h0, nu) / n_f;
            for n in 0..=steps {
                for k in 0..d.e {
                    let (init, actual, rows) = match field {
                        "u" => (&th0.w1[k] * &fs[n].h0 / n_f.sqrt(), fs[n].u[k].clone(), d.n_e),
                        "m" => (&th0.w2[k] * &fs[n].phi_u[k] / (d.n_e as f64).sqrt(), fs[n].m[k].clone(), d.n),
                        _ => {
                            let init = (th0.r.rows(k, 1) * &fs[n].h0) * n_f.powf(-d.gamma);
                            (init, fs[n].p.rows(k, 1).into_owned(), 1)
                        }
                    };
                    let mut acc = Kahan::new(init.iter().copied().collect());
                    for m in 0..n {
                        for nu in 0..p {
                            for mu in 0..p {
                                let s = c(m, mu) * fs[m].w[(k, mu)] / e_f;
                                match field {
                                    "u" => {
                                        let coef = eta[1] * dt * s * h0_gram(m, mu, n, nu);
                                        for a in 0..rows {
                                            acc.add(nu * rows + a, coef * fs[m].delta[k][(a, mu)]);
                                        }
                                    }
                                    "m" => {
                                        let phi1 = dot_cols(&fs[m].phi_u[k], mu, &fs[n].phi_u[k], nu) / d.n_e as f64;
                                        let coef = eta[2] * dt * s * phi1;
                                        for i in 0..rows {
                                            acc.add(nu * rows + i, coef * fs[m].g[(i, mu)]);
                                        }
                                    }
                                    _ => {
                                        let a_dw = fs[m].a[(k, mu)] * fs[m].dw[(k, mu)];
                                        let scale = n_f.powf(2.0 - 2.0 * d.gamma) / e_f;
                                        acc.add(nu, eta[4] * dt * c(m, mu) * a_dw * scale * h0_gram(m, mu, n, nu));
                                    }
                                }
                            }
                        }
                    }
                    let base = k * rows * p;
                    for (idx, &v) in actual.iter().enumerate() {
                        rep.record(base + idx, n, v, acc.get(idx));
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{run_trajectory, BiasMode, LearningRates, TrainConfig};
    use crate::model::{Activations, Dataset, GateMode, Model, ModelDims};

    fn trace(steps: usize, eta: f64, gate: GateMode) -> Trace {
        let dims = ModelDims::new(2, 8, 4, 4, 3).with_steps(steps, 0.05).with_kappa(0.5);
        let model = Model::new(dims, Activations::default(), gate).unwrap();
        let mut cfg = TrainConfig::new(model, Dataset::probe_task(2, 3, 8), LearningRates::uniform(eta));
        cfg.retention = Retention::Fields;
        cfg.bias = BiasMode::Balance { eta_bias: 0.3 };
        run_trajectory(&cfg).unwrap()
    }

    #[test]
    fn step_zero_is_init_consistency() {
        let t = trace(0, 1.0, GateMode::Soft);
        for f in super::super::FIELDS {
            assert!(check_volterra_field(&t, f, Tolerance::default()).unwrap().max_abs < 1e-14, "{f}");
        }
    }

    #[test]
    fn frozen_rates_reduce_to_init_term() {
        let t = trace(6, 0.0, GateMode::Soft);
        for f in super::super::FIELDS {
            assert!(check_volterra_field(&t, f, Tolerance::default()).unwrap().max_abs < 1e-14, "{f}");
        }
    }

    #[test]
    fn trained_runs_satisfy_every_field() {
        for gate in [GateMode::Soft, GateMode::TopK] {
            let t = trace(60, 1.0, gate);
            for f in super::super::FIELDS {
                let r = check_volterra_field(&t, f, Tolerance::default()).unwrap();
                assert!(r.passed(), "{gate:?} {f}: {}", r.max_abs);
            }
        }
    }

    #[test]
    fn corrupted_h0_is_caught() {
        let mut t = trace(10, 1.0, GateMode::Soft);
        t.records[4].fields.as_mut().unwrap().h0[(3, 1)] += 1e-6;
        let r = check_volterra_field(&t, "h0", Tolerance::default()).unwrap();
        assert!(r.max_abs >= 0.999e-6 && !r.passed());
        assert_eq!(r.worst_step, 4);
    }

    #[test]
    fn unknown_field() {
        let t = trace(0, 1.0, GateMode::Soft);
        assert!(check_volterra_field(&t, "z", Tolerance::default()).is_err());
    }
}
