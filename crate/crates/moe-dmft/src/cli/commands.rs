use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::output::{kernel_row, num, read_kernel_csv, Csv, Jsonl, KernelKey, KERNEL_HEADER};
use super::{RunConfig, EXIT_CHECK_FAILED, EXIT_OK};
use crate::dynamics::{run_trajectory, LearningRates, RunError, Trace, TrainConfig};
use crate::error::{Error, Result};
use crate::kernels::{global_kernels, mixture_kernels, Frames, OneTimeMixture, TwoTimeKernel};
use crate::meanfield::{solve_dmft, DmftConfig, DmftSolution};
use crate::model::{InitScheme, Model};
use crate::scaling::{
    apply_parameterization, classify_limit, collapse_metric, concentration_fit, run_sweep, BaseHyper, Parameterization,
    SweepBase, SweepPlan,
};
use crate::seed;
use crate::volterra::{check_all, Tolerance};

fn prepare(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.resolved.toml"), cfg.to_toml()?)?;
    Ok(&cfg.out)
}

/// Stored init scheme and rates after the optional parameterization.
fn resolved_hyper(cfg: &RunConfig) -> Result<(InitScheme, LearningRates)> {
    match &cfg.parameterization {
        Some(name) => {
            let base = BaseHyper { init: cfg.init.clone(), lrs: cfg.lrs.clone() };
            apply_parameterization(&base, &cfg.model, &Parameterization::named(name)?)
        }
        None => Ok((cfg.init.clone(), cfg.lrs.clone())),
    }
}

#[derive(Serialize)]
struct StepLog<'a> {
    step: usize,
    time: f64,
    loss: f64,
    mean_abs_drive: f64,
    loads: &'a [f64],
    norms: &'a [f64; 6],
}

fn write_curve(path: &Path, trace: &Trace) -> Result<()> {
    let mut csv = Csv::create(path, &["step", "time", "loss", "mean_abs_drive"])?;
    for r in &trace.records {
        csv.row(&[r.step.to_string(), num(r.time), num(r.loss), num(r.mean_abs_drive())])?;
    }
    csv.finish()
}

fn write_two_time(csv: &mut Csv, k: &TwoTimeKernel) -> Result<()> {
    for (tag, mu, nu, n, np, v) in k.rows() {
        csv.row(&kernel_row(tag, mu, nu, n, np, v))?;
    }
    Ok(())
}

fn write_one_time(csv: &mut Csv, k: &OneTimeMixture) -> Result<()> {
    for (tag, mu, nu, n, np, v) in k.rows() {
        csv.row(&kernel_row(tag, mu, nu, n, np, v))?;
    }
    Ok(())
}

fn write_losses(csv: &mut Csv, times: &[usize], loss: &[f64]) -> Result<()> {
    for &n in times {
        csv.row(&kernel_row("loss", 0, 0, n, n, loss[n]))?;
    }
    Ok(())
}

/// Train one model; writes the trace, step log, loss curve and kernels.
/// A diverged run keeps its partial outputs and exits with a check failure.
pub fn cmd_train(cfg: &RunConfig) -> Result<i32> {
    let (init, lrs) = resolved_hyper(cfg)?;
    let model = Model::new(cfg.model.clone(), cfg.activations.clone(), cfg.gate)?;
    let mut tc = TrainConfig::new(model, cfg.dataset()?, lrs);
    tc.init = init;
    tc.bias = cfg.bias;
    tc.loss = cfg.loss.clone();
    tc.seed = cfg.seed;
    tc.retention = cfg.retention;
    let out = prepare(cfg)?;
    let (trace, code) = match run_trajectory(&tc) {
        Ok(t) => (t, EXIT_OK),
        Err(RunError::Config(e)) => return Err(e),
        Err(RunError::Diverged { step, reason, partial }) => {
            eprintln!("divergence at step {step}: {reason}");
            (*partial, EXIT_CHECK_FAILED)
        }
    };
    trace.write_binary(BufWriter::new(File::create(out.join("trace.bin"))?))?;
    let mut log = Jsonl::create(&out.join("steps.jsonl"))?;
    for r in &trace.records {
        log.record(&StepLog {
            step: r.step,
            time: r.time,
            loss: r.loss,
            mean_abs_drive: r.mean_abs_drive(),
            loads: r.loads.as_slice(),
            norms: &r.norms,
        })?;
    }
    log.finish()?;
    write_curve(&out.join("loss.csv"), &trace)?;
    if code == EXIT_OK && trace.records.iter().all(|r| r.fields.is_some()) {
        let frames = Frames::from_trace(&trace, &cfg.kernels.grid)?;
        let tilde = cfg.kernels.tilde;
        let (h0, h3, g) = global_kernels(&frames, tilde);
        let mx = mixture_kernels(&frames, tilde);
        let mut csv = Csv::create(&out.join("kernels.csv"), &KERNEL_HEADER)?;
        for k in [&h0, &h3, &g, &mx.phi, &mx.psi, &mx.aa] {
            write_two_time(&mut csv, k)?;
        }
        write_one_time(&mut csv, &mx.a)?;
        write_losses(&mut csv, &frames.times, &trace.losses())?;
        csv.finish()?;
    }
    Ok(code)
}

/// Check every telescoping and Volterra identity of a stored trace.
pub fn cmd_verify(trace_path: &Path, tol: Tolerance, out: Option<&Path>) -> Result<i32> {
    let f = File::open(trace_path).map_err(|e| Error::config(format!("cannot open `{}`: {e}", trace_path.display())))?;
    let trace = Trace::read_binary(std::io::BufReader::new(f))?;
    let reports = check_all(&trace, tol)?;
    let header = ["identity", "max_abs", "max_rel", "where", "tolerance", "passed"];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.identity.clone(),
                num(r.max_abs),
                num(r.max_rel),
                format!("index {} step {}", r.worst_index, r.worst_step),
                num(r.tolerance),
                r.passed().to_string(),
            ]
        })
        .collect();
    println!("{}", header.join(","));
    for r in &rows {
        println!("{}", r.join(","));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut csv = Csv::create(&dir.join("residuals.csv"), &header)?;
        for r in &rows {
            csv.row(r)?;
        }
        csv.finish()?;
    }
    Ok(if reports.iter().all(|r| r.passed()) { EXIT_OK } else { EXIT_CHECK_FAILED })
}

/// Mean-field problem matching the configured model.
pub fn dmft_config(cfg: &RunConfig) -> Result<DmftConfig> {
    let s = cfg.dmft.as_ref().ok_or_else(|| Error::config("the config has no [dmft] table"))?;
    let d = &cfg.model;
    let mut c = DmftConfig::new(cfg.dataset()?, d.steps, d.dt, s.rates.clone());
    c.act = cfg.activations.clone();
    c.loss = cfg.loss.clone();
    c.gate = cfg.gate;
    c.kappa = d.kappa;
    c.alpha = d.alpha();
    c.init = cfg.init.clone();
    c.bias = cfg.bias;
    c.pops = s.pops.clone();
    c.probes = s.probes;
    c.alpha_star = s.alpha_star;
    c.damping = s.damping;
    c.max_iter = s.max_iter;
    c.tol = s.tol;
    c.seed = seed::derive(cfg.seed, "dmft");
    c.frozen_noise = s.frozen_noise;
    c.validate()?;
    Ok(c)
}

/// Order-parameter names in the finite kernel tables they correspond to.
const DMFT_NAMES: [(&str, &str); 8] = [
    ("C_h", "H0"),
    ("C_g", "Gt"),
    ("C_phi3", "H3"),
    ("M_phi", "MPhi"),
    ("M_psi", "dmft:M_psi"),
    ("M_AA", "MAAt"),
    ("R_phixi", "dmft:R_phixi"),
    ("R_gchi", "dmft:R_gchi"),
];

fn write_dmft_kernels(path: &Path, sol: &DmftSolution, cfg: &DmftConfig, times: &[usize]) -> Result<()> {
    let k = &sol.kernels;
    let mut csv = Csv::create(path, &KERNEL_HEADER)?;
    for (name, tag) in DMFT_NAMES {
        let full = k.two_time(name)?;
        for &n in times {
            for &np in times {
                for mu in 0..k.p {
                    for nu in 0..k.p {
                        csv.row(&kernel_row(tag, mu, nu, n, np, full.get(mu, nu, n, np)))?;
                    }
                }
            }
        }
    }
    for &n in times {
        for mu in 0..k.p {
            csv.row(&kernel_row("MAt", mu, mu, n, n, k.m_a[(mu, n)]))?;
        }
    }
    write_losses(&mut csv, times, &sol.loss_curve(cfg))?;
    csv.finish()
}

/// Solve the mean-field fixed point; writes kernels, loss curve and the
/// iteration log. Non-convergence is a check failure.
pub fn cmd_dmft(cfg: &RunConfig) -> Result<i32> {
    let dc = dmft_config(cfg)?;
    let out = prepare(cfg)?;
    let sol = solve_dmft(&dc)?;
    let mut log = Jsonl::create(&out.join("convergence.jsonl"))?;
    for r in &sol.log {
        log.record(r)?;
    }
    log.finish()?;
    let loss = sol.loss_curve(&dc);
    let mut csv = Csv::create(&out.join("loss.csv"), &["step", "time", "loss"])?;
    for (n, l) in loss.iter().enumerate() {
        csv.row(&[n.to_string(), num(n as f64 * dc.dt), num(*l)])?;
    }
    csv.finish()?;
    write_dmft_kernels(&out.join("kernels.csv"), &sol, &dc, &cfg.kernels.grid.times(dc.steps))?;
    if !sol.converged {
        eprintln!("no convergence after {} iterations (residual {:e})", sol.iterations, sol.residual);
        return Ok(EXIT_CHECK_FAILED);
    }
    Ok(EXIT_OK)
}

/// Sweep plan described by the config.
pub fn sweep_plan(cfg: &RunConfig) -> Result<SweepPlan> {
    let s = cfg.sweep.as_ref().ok_or_else(|| Error::config("the config has no [sweep] table"))?;
    let base = SweepBase {
        dims: cfg.model.clone(),
        act: cfg.activations.clone(),
        gate: cfg.gate,
        loss: cfg.loss.clone(),
        bias: cfg.bias,
        hyper: BaseHyper { init: cfg.init.clone(), lrs: cfg.lrs.clone() },
        data: cfg.dataset()?,
    };
    let mut plan = SweepPlan::new(base, &s.scheme, s.scales.clone(), s.seeds);
    plan.path = s.path;
    plan.master_seed = cfg.seed;
    plan.couple_sizes = s.couple_sizes;
    plan.probes = s.probes.clone();
    plan.states = s.states.clone();
    plan.validate()?;
    Ok(plan)
}

/// Run a size sweep; writes per-run curves and observables, seed-averaged
/// curves, concentration fits and collapse metrics.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<i32> {
    let plan = sweep_plan(cfg)?;
    let out = prepare(cfg)?;
    let rep = run_sweep(&plan)?;
    let mut runs = Csv::create(&out.join("runs.csv"), &["cell", "scale", "n", "e", "n_e", "seed_index", "seed", "diverged"])?;
    let mut losses = Csv::create(&out.join("losses.csv"), &["cell", "seed_index", "step", "loss"])?;
    let names = rep.observable_names();
    let mut obs = Csv::create(&out.join("observables.csv"), &["cell", "seed_index", "observable", "value"])?;
    for r in &rep.results {
        runs.row(&[
            r.cell.to_string(),
            num(r.scale),
            r.dims.n.to_string(),
            r.dims.e.to_string(),
            r.dims.n_e.to_string(),
            r.seed_index.to_string(),
            r.seed.to_string(),
            r.diverged.clone().unwrap_or_default().replace(',', ";"),
        ])?;
        for (n, l) in r.losses.iter().enumerate() {
            losses.row(&[r.cell.to_string(), r.seed_index.to_string(), n.to_string(), num(*l)])?;
        }
        for (name, v) in names.iter().zip(&r.observables) {
            obs.row(&[r.cell.to_string(), r.seed_index.to_string(), name.clone(), num(*v)])?;
        }
    }
    runs.finish()?;
    losses.finish()?;
    obs.finish()?;

    let mut mean = Csv::create(&out.join("mean_losses.csv"), &["cell", "scale", "step", "loss"])?;
    let mut curves = Vec::new();
    for (c, &s) in plan.scales.iter().enumerate() {
        let m = rep.mean_loss(c).ok();
        for (n, l) in m.iter().flatten().enumerate() {
            mean.row(&[c.to_string(), num(s), n.to_string(), num(*l)])?;
        }
        curves.push(m);
    }
    mean.finish()?;

    let mut collapse = Csv::create(&out.join("collapse.csv"), &["scale", "previous_scale", "horizon", "metric"])?;
    let horizon = plan.base.dims.steps;
    for c in 1..curves.len() {
        if let (Some(a), Some(b)) = (&curves[c - 1], &curves[c]) {
            let m = collapse_metric(a, b, horizon)?;
            collapse.row(&[num(plan.scales[c]), num(plan.scales[c - 1]), horizon.to_string(), num(m)])?;
        }
    }
    collapse.finish()?;

    let mut fits = Csv::create(&out.join("fits.csv"), &["observable", "slope", "intercept", "r2"])?;
    for name in &names {
        match concentration_fit(&rep, name) {
            Ok(f) => fits.row(&[name.clone(), num(f.slope), num(f.intercept), num(f.r2)])?,
            Err(e) => eprintln!("no concentration fit for {name}: {e}"),
        }
    }
    fits.finish()?;

    let dims = (0..plan.scales.len()).map(|c| plan.dims(c)).collect::<Result<Vec<_>>>()?;
    if let Ok(regime) = classify_limit(&dims) {
        fs::write(out.join("regime.json"), serde_json::to_string_pretty(&regime).map_err(|e| Error::Serde(e.to_string()))?)?;
    }
    Ok(EXIT_OK)
}

/// One line of the gap table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    /// Kernel tag, with `[diag]` for the equal-time diagonal `K_{μμ}[n, n]`.
    pub kernel: String,
    pub entries: usize,
    pub max_abs: f64,
    /// `max |finite − dmft| / max(|dmft|, 1e-12)`.
    pub max_rel: f64,
    pub worst: KernelKey,
}

/// Entrywise gaps between the seed average of `finite` tables and the
/// `dmft` table over their shared entries. Writes `gaps.csv` into `out`.
/// With `tol`, any `checked` row (all rows when empty) above it fails.
pub fn cmd_compare(finite: &[PathBuf], dmft: &Path, out: &Path, tol: Option<f64>, checked: &[String]) -> Result<(Vec<CompareRow>, i32)> {
    if finite.is_empty() {
        return Err(Error::config("compare needs at least one finite kernel table"));
    }
    let tables = finite.iter().map(|p| read_kernel_csv(p)).collect::<Result<Vec<_>>>()?;
    let reference = read_kernel_csv(dmft)?;
    let mut avg: BTreeMap<KernelKey, f64> = BTreeMap::new();
    for key in tables[0].keys() {
        if let Some(sum) = tables.iter().map(|t| t.get(key)).sum::<Option<f64>>() {
            avg.insert(key.clone(), sum / tables.len() as f64);
        }
    }
    let mut rows: BTreeMap<String, CompareRow> = BTreeMap::new();
    for (key, fv) in &avg {
        let Some(&dv) = reference.get(key) else { continue };
        let abs = (fv - dv).abs();
        let rel = abs / dv.abs().max(1e-12);
        let (abs, rel) = if abs.is_nan() { (f64::INFINITY, f64::INFINITY) } else { (abs, rel) };
        let mut names = vec![key.0.clone()];
        if key.1 == key.2 && key.3 == key.4 && key.0 != "loss" {
            names.push(format!("{}[diag]", key.0));
        }
        for name in names {
            let row = rows.entry(name.clone()).or_insert_with(|| CompareRow {
                kernel: name,
                entries: 0,
                max_abs: 0.0,
                max_rel: 0.0,
                worst: key.clone(),
            });
            row.entries += 1;
            row.max_abs = row.max_abs.max(abs);
            if rel > row.max_rel {
                row.max_rel = rel;
                row.worst = key.clone();
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::config("the kernel tables share no entries"));
    }
    let rows: Vec<CompareRow> = rows.into_values().collect();
    fs::create_dir_all(out)?;
    let mut csv = Csv::create(&out.join("gaps.csv"), &["kernel", "entries", "max_abs", "max_rel", "where"])?;
    for r in &rows {
        let w = format!("mu {} nu {} n {} np {}", r.worst.1, r.worst.2, r.worst.3, r.worst.4);
        csv.row(&[r.kernel.clone(), r.entries.to_string(), num(r.max_abs), num(r.max_rel), w])?;
    }
    csv.finish()?;
    let code = match tol {
        Some(t) => {
            for name in checked {
                if !rows.iter().any(|r| &r.kernel == name) {
                    return Err(Error::config(format!("no compared entries for `{name}`")));
                }
            }
            let fails = rows.iter().any(|r| (checked.is_empty() || checked.contains(&r.kernel)) && !(r.max_rel <= t));
            if fails {
                EXIT_CHECK_FAILED
            } else {
                EXIT_OK
            }
        }
        None => EXIT_OK,
    };
    Ok((rows, code))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::Overrides;

    fn config(dir: &Path, extra: &str) -> RunConfig {
        let text = format!(
            "out = \"{}\"\nseed = 3\n[model]\nd = 2\nn = 6\ne = 2\nn_e = 4\np = 3\nsteps = 5\ndt = 0.05\n[kernels.grid]\ndense_until = 2\n{extra}",
            dir.display()
        );
        RunConfig::resolve(&text, &BTreeMap::new(), &Overrides::default()).unwrap()
    }

    #[test]
    fn train_then_verify() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), "");
        assert_eq!(cmd_train(&cfg).unwrap(), EXIT_OK);
        for f in ["config.resolved.toml", "trace.bin", "steps.jsonl", "loss.csv", "kernels.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let k = read_kernel_csv(&dir.path().join("kernels.csv")).unwrap();
        assert!(k.contains_key(&("H0".to_string(), 0, 0, 4, 5)));
        assert!(!k.contains_key(&("H0".to_string(), 0, 0, 3, 3)));
        assert_eq!(cmd_verify(&dir.path().join("trace.bin"), Tolerance::default(), Some(dir.path())).unwrap(), EXIT_OK);
    }

    #[test]
    fn zero_steps_give_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path(), "");
        cfg.model.steps = 0;
        assert_eq!(cmd_train(&cfg).unwrap(), EXIT_OK);
        let text = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(fs::read_to_string(dir.path().join("steps.jsonl")).unwrap().lines().count(), 1);
    }

    #[test]
    fn compare_identical_tables_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), "");
        cmd_train(&cfg).unwrap();
        let k = dir.path().join("kernels.csv");
        let (rows, code) = cmd_compare(&[k.clone(), k.clone()], &k, dir.path(), Some(0.0), &[]).unwrap();
        assert_eq!(code, EXIT_OK);
        assert!(rows.iter().all(|r| r.max_abs == 0.0));
        assert!(rows.iter().any(|r| r.kernel == "H0[diag]"));
        assert!(cmd_compare(std::slice::from_ref(&k), &k, dir.path(), Some(0.0), &["nope".into()]).is_err());
    }

    #[test]
    fn missing_tables_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), "");
        assert!(matches!(cmd_dmft(&cfg), Err(Error::Config(_))));
        assert!(matches!(cmd_sweep(&cfg), Err(Error::Config(_))));
        assert!(matches!(cmd_verify(&dir.path().join("none.bin"), Tolerance::default(), None), Err(Error::Config(_))));
    }
}
