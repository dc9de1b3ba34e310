use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{apply_parameterization, BaseHyper, Parameterization};
use crate::dynamics::{run_observed, BiasMode, Retention, RunError, TrainConfig};
use crate::error::{Error, Result};
use crate::kernels::{dbl_estimate, global_kernels, level_snapshot, mixture_kernels, Frames};
use crate::model::{Activations, Dataset, FieldState, GateMode, LossKind, Model, ModelDims};
use crate::seed;

/// Everything shared by the cells of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepBase {
    pub dims: ModelDims,
    pub act: Activations,
    pub gate: GateMode,
    pub loss: LossKind,
    pub bias: BiasMode,
    pub hyper: BaseHyper,
    pub data: Dataset,
}

impl SweepBase {
    /// Probe task of the given dims with default activations and soft gating.
    pub fn probe(dims: ModelDims, data_seed: u64) -> Self {
        let data = Dataset::probe_task(dims.d, dims.p, data_seed);
        SweepBase {
            dims,
            act: Activations::default(),
            gate: GateMode::Soft,
            loss: LossKind::default(),
            bias: BiasMode::Gradient,
            hyper: BaseHyper::default(),
            data,
        }
    }
}

/// One kernel entry `K_{μν}[n, n']` recorded per run.
///
/// Two-time kernels: `H0`, `H3`, `G`, `Gt` (`G̃`), `MPhi`, `MPsi`, `MAA`,
/// `MAAt`. One-time mixtures `MA`, `MAt` need `mu = nu` and `n = np`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelProbe {
    pub kernel: String,
    pub mu: usize,
    pub nu: usize,
    pub n: usize,
    pub np: usize,
}

const TWO_TIME: [&str; 8] = ["H0", "H3", "G", "Gt", "MPhi", "MPsi", "MAA", "MAAt"];
const ONE_TIME: [&str; 2] = ["MA", "MAt"];

impl KernelProbe {
    pub fn new(kernel: &str, mu: usize, nu: usize, n: usize, np: usize) -> Self {
        KernelProbe { kernel: kernel.into(), mu, nu, n, np }
    }

    pub fn name(&self) -> String {
        format!("{}[{},{},{},{}]", self.kernel, self.mu, self.nu, self.n, self.np)
    }

    fn validate(&self, p: usize, steps: usize) -> Result<()> {
        let k = self.kernel.as_str();
        if !TWO_TIME.contains(&k) && !ONE_TIME.contains(&k) {
            return Err(Error::config(format!("unknown kernel `{k}` in probe")));
        }
        if ONE_TIME.contains(&k) && (self.mu != self.nu || self.n != self.np) {
            return Err(Error::config(format!("`{}` is one-time and diagonal in data", self.name())));
        }
        if self.mu >= p || self.nu >= p || self.n > steps || self.np > steps {
            return Err(Error::Index(format!("probe `{}` outside P = {p}, steps = {steps}", self.name())));
        }
        Ok(())
    }
}

/// Particle records of one level at one step, kept per run for
/// bounded-Lipschitz comparisons between seed groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateProbe {
    pub level: char,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPlan {
    pub base: SweepBase,
    pub scheme: String,
    /// Scale factors `s`; cell dims are `X·s^{path_X}`, rounded.
    pub scales: Vec<f64>,
    /// Growth exponents for `(N, E, N_e)`; `[1, 1, 1]` is proportional.
    pub path: [f64; 3],
    pub seeds: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub probes: Vec<KernelProbe>,
    #[serde(default)]
    pub states: Vec<StateProbe>,
    /// Use the same initialization seed for seed `j` in every cell. Since
    /// weights are drawn per row and per hidden unit, a larger cell then
    /// extends the smaller one's initialization.
    #[serde(default)]
    pub couple_sizes: bool,
}

impl SweepPlan {
    pub fn new(base: SweepBase, scheme: &str, scales: Vec<f64>, seeds: usize) -> Self {
        SweepPlan {
            base,
            scheme: scheme.into(),
            scales,
            path: [1.0; 3],
            seeds,
            master_seed: 0,
            probes: Vec::new(),
            states: Vec::new(),
            couple_sizes: false,
        }
    }

    /// Dims of cell `c`.
    pub fn dims(&self, c: usize) -> Result<ModelDims> {
        let s = *self.scales.get(c).ok_or_else(|| Error::Index(format!("cell {c} of {}", self.scales.len())))?;
        let b = &self.base.dims;
        let grow = |x: usize, a: f64| -> Result<usize> {
            let v = (x as f64 * s.powf(a)).round();
            if !(1.0..1e9).contains(&v) {
                return Err(Error::config(format!("scale {s} gives a dimension of {v}")));
            }
            Ok(v as usize)
        };
        Ok(ModelDims { n: grow(b.n, self.path[0])?, e: grow(b.e, self.path[1])?, n_e: grow(b.n_e, self.path[2])?, ..b.clone() })
    }

    /// Initialization seed of run `(c, j)`.
    pub fn run_seed(&self, c: usize, j: usize) -> u64 {
        if self.couple_sizes {
            seed::derive(self.master_seed, &format!("seed/{j}"))
        } else {
            seed::derive(self.master_seed, &format!("cell/{c}/seed/{j}"))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.seeds == 0 {
            return Err(Error::config("a sweep needs at least one scale and one seed"));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.path.iter().any(|a| !a.is_finite()) {
            return Err(Error::config("scales must be positive and path exponents finite"));
        }
        Parameterization::named(&self.scheme)?;
        if self.base.data.len() != self.base.dims.p || self.base.data.dim() != self.base.dims.d {
            return Err(Error::Shape("sweep data does not match the base dims".into()));
        }
        for c in 0..self.scales.len() {
            self.dims(c)?.validate(self.base.gate)?;
        }
        for p in &self.probes {
            p.validate(self.base.dims.p, self.base.dims.steps)?;
        }
        for s in &self.states {
            if !matches!(s.level, 'S' | 'X' | 'Y') || s.step > self.base.dims.steps {
                return Err(Error::config(format!("bad state probe {s:?}")));
            }
        }
        Ok(())
    }

    /// Trajectory configuration of run `(c, j)`.
    pub fn train_config(&self, c: usize, j: usize) -> Result<TrainConfig> {
        let dims = self.dims(c)?;
        let (init, lrs) = apply_parameterization(&self.base.hyper, &dims, &Parameterization::named(&self.scheme)?)?;
        let model = Model::new(dims, self.base.act.clone(), self.base.gate)?;
        let mut cfg = TrainConfig::new(model, self.base.data.clone(), lrs);
        cfg.init = init;
        cfg.bias = self.base.bias;
        cfg.loss = self.base.loss.clone();
        cfg.seed = self.run_seed(c, j);
        cfg.retention = Retention::Summary;
        Ok(cfg)
    }
}

/// Outcome of one `(cell, seed)` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: usize,
    pub scale: f64,
    pub dims: ModelDims,
    pub seed_index: usize,
    pub seed: u64,
    /// Loss at every completed step.
    pub losses: Vec<f64>,
    /// One value per plan probe; NaN after a divergence.
    pub observables: Vec<f64>,
    /// Records per state probe; empty after a divergence.
    pub states: Vec<Vec<Vec<f64>>>,
    pub diverged: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub plan: SweepPlan,
    /// Ordered by cell, then seed.
    pub results: Vec<CellResult>,
}

impl SweepReport {
    pub fn observable_names(&self) -> Vec<String> {
        self.plan.probes.iter().map(KernelProbe::name).collect()
    }

    pub fn observable_index(&self, name: &str) -> Result<usize> {
        self.observable_names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::config(format!("observable `{name}` was not recorded")))
    }

    pub fn cell(&self, c: usize) -> impl Iterator<Item = &CellResult> {
        self.results.iter().filter(move |r| r.cell == c)
    }

    /// The same sweep restricted to its first `k` seeds.
    pub fn first_seeds(&self, k: usize) -> Result<SweepReport> {
        if k == 0 || k > self.plan.seeds {
            return Err(Error::config(format!("cannot keep {k} of {} seeds", self.plan.seeds)));
        }
        let mut plan = self.plan.clone();
        plan.seeds = k;
        let results = self.results.iter().filter(|r| r.seed_index < k).cloned().collect();
        Ok(SweepReport { plan, results })
    }

    /// Seed-averaged loss curve of a cell over finished runs.
    pub fn mean_loss(&self, c: usize) -> Result<Vec<f64>> {
        let runs: Vec<&CellResult> = self.cell(c).filter(|r| r.diverged.is_none()).collect();
        if runs.is_empty() {
            return Err(Error::Divergence { step: 0, reason: format!("every run of cell {c} diverged") });
        }
        let len = runs[0].losses.len();
        Ok((0..len).map(|n| runs.iter().map(|r| r.losses[n]).sum::<f64>() / runs.len() as f64).collect())
    }

    /// Randomized bounded-Lipschitz lower bound between the pooled particle
    /// records of the first and second half of the finished seeds, per cell.
    pub fn seed_group_dbl(&self, state: usize, n_test: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
        if state >= self.plan.states.len() {
            return Err(Error::Index(format!("state probe {state} of {}", self.plan.states.len())));
        }
        (0..self.plan.scales.len())
            .map(|c| {
                let runs: Vec<&CellResult> = self.cell(c).filter(|r| r.diverged.is_none()).collect();
                if runs.len() < 2 {
                    return Err(Error::config(format!("cell {c} has fewer than two finished seeds")));
                }
                let half = runs.len() / 2;
                let pool = |rs: &[&CellResult]| rs.iter().flat_map(|r| r.states[state].iter().cloned()).collect::<Vec<_>>();
                let d = dbl_estimate(&pool(&runs[..half]), &pool(&runs[half..2 * half]), n_test, seed)?;
                Ok((self.plan.scales[c], d))
            })
            .collect()
    }
}

fn probe_values(model: &Model, probes: &[KernelProbe], snaps: &[(usize, FieldState)]) -> Result<Vec<f64>> {
    if probes.is_empty() {
        return Ok(Vec::new());
    }
    let times: Vec<usize> = snaps.iter().map(|(n, _)| *n).collect();
    let frames = Frames::new(model, times, snaps.iter().map(|(_, f)| f).collect())?;
    let need = |names: &[&str]| probes.iter().any(|p| names.contains(&p.kernel.as_str()));
    let plain = need(&["H0", "H3", "G"]).then(|| global_kernels(&frames, false));
    let tilde = need(&["Gt"]).then(|| global_kernels(&frames, true));
    let mix = need(&["MPhi", "MPsi", "MAA", "MA"]).then(|| mixture_kernels(&frames, false));
    let mixt = need(&["MAAt", "MAt"]).then(|| mixture_kernels(&frames, true));
    probes
        .iter()
        .map(|p| {
            let two = |k: &crate::kernels::TwoTimeKernel| k.at(p.mu, p.nu, p.n, p.np);
            let one = |m: &crate::kernels::OneTimeMixture| -> Result<f64> {
                let i = m.times.binary_search(&p.n).map_err(|_| Error::Index(format!("step {} not recorded", p.n)))?;
                Ok(m.get(p.mu, i))
            };
            match p.kernel.as_str() {
                "H0" => two(&plain.as_ref().unwrap().0),
                "H3" => two(&plain.as_ref().unwrap().1),
                "G" => two(&plain.as_ref().unwrap().2),
                "Gt" => two(&tilde.as_ref().unwrap().2),
                "MPhi" => two(&mix.as_ref().unwrap().phi),
                "MPsi" => two(&mix.as_ref().unwrap().psi),
                "MAA" => two(&mix.as_ref().unwrap().aa),
                "MAAt" => two(&mixt.as_ref().unwrap().aa),
                "MA" => one(&mix.as_ref().unwrap().a),
                "MAt" => one(&mixt.as_ref().unwrap().a),
                other => Err(Error::config(format!("unknown kernel `{other}`"))),
            }
        })
        .collect()
}

fn run_one(plan: &SweepPlan, c: usize, j: usize) -> Result<CellResult> {
    let cfg = plan.train_config(c, j)?;
    let mut times: Vec<usize> = plan.probes.iter().flat_map(|p| [p.n, p.np]).collect();
    times.sort_unstable();
    times.dedup();
    let mut snaps: Vec<(usize, FieldState)> = Vec::new();
    let mut states: Vec<Vec<Vec<f64>>> = vec![Vec::new(); plan.states.len()];
    let mut state_err = None;
    let dims = cfg.model.dims.clone();
    let outcome = run_observed(&cfg, |n, ps, fs| {
        if times.binary_search(&n).is_ok() {
            snaps.push((n, fs.clone()));
        }
        for (slot, sp) in states.iter_mut().zip(&plan.states) {
            if sp.step == n {
                match level_snapshot(&dims, ps, fs, sp.level) {
                    Ok(m) => *slot = rows(&m),
                    Err(e) => state_err = Some(e),
                }
            }
        }
    });
    if let Some(e) = state_err {
        return Err(e);
    }
    let mut res = CellResult {
        cell: c,
        scale: plan.scales[c],
        dims: dims.clone(),
        seed_index: j,
        seed: cfg.seed,
        losses: Vec::new(),
        observables: vec![f64::NAN; plan.probes.len()],
        states: Vec::new(),
        diverged: None,
    };
    match outcome {
        Ok(trace) => {
            res.losses = trace.losses();
            res.observables = probe_values(&cfg.model, &plan.probes, &snaps)?;
            res.states = states;
        }
        Err(RunError::Diverged { step, reason, partial }) => {
            res.losses = partial.losses();
            res.diverged = Some(format!("step {step}: {reason}"));
        }
        Err(RunError::Config(e)) => return Err(e),
    }
    Ok(res)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Run every `(cell, seed)` pair in parallel. Divergent runs are recorded
/// with their partial loss curve; configuration errors abort the sweep.
pub fn run_sweep(plan: &SweepPlan) -> Result<SweepReport> {
    plan.validate()?;
    let jobs: Vec<(usize, usize)> = (0..plan.scales.len()).flat_map(|c| (0..plan.seeds).map(move |j| (c, j))).collect();
    let results = jobs.par_iter().map(|&(c, j)| run_one(plan, c, j)).collect::<Result<Vec<_>>>()?;
    Ok(SweepReport { plan: plan.clone(), results })
}

/// `points` learning-rate multipliers around `center`, half a decade apart.
pub fn lr_grid(center: f64, points: usize) -> Vec<f64> {
    let mid = (points as f64 - 1.0) / 2.0;
    (0..points).map(|i| center * 10f64.powf((i as f64 - mid) / 2.0)).collect()
}

/// Seed-averaged loss at the final step for each global rate multiplier at
/// one scale of `plan`. Divergent runs count as infinite loss.
pub fn run_lr_scan(plan: &SweepPlan, scale: f64, multipliers: &[f64]) -> Result<Vec<f64>> {
    multipliers
        .iter()
        .map(|&m| {
            let mut p = plan.clone();
            p.scales = vec![scale];
            p.base.hyper.lrs.gamma0 *= m;
            p.probes.clear();
            p.states.clear();
            let r = run_sweep(&p)?;
            let finals: Vec<f64> = r
                .results
                .iter()
                .map(|c| match (&c.diverged, c.losses.last()) {
                    (None, Some(&l)) if l.is_finite() => l,
                    _ => f64::INFINITY,
                })
                .collect();
            Ok(finals.iter().sum::<f64>() / finals.len() as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::run_trajectory;

    fn plan(scales: Vec<f64>, seeds: usize) -> SweepPlan {
        let base = SweepBase::probe(ModelDims::new(4, 8, 2, 4, 3).with_steps(6, 0.05), 1);
        let mut p = SweepPlan::new(base, "moe-table", scales, seeds);
        p.master_seed = 11;
        p.probes = vec![KernelProbe::new("H0", 0, 1, 6, 6), KernelProbe::new("MAt", 2, 2, 6, 6)];
        p
    }

    #[test]
    fn degenerate_sweep_is_a_direct_run() {
        let p = plan(vec![1.0], 1);
        let r = run_sweep(&p).unwrap();
        let direct = run_trajectory(&p.train_config(0, 0).unwrap()).unwrap();
        assert_eq!(r.results[0].losses, direct.losses());
        assert_eq!(r.results.len(), 1);
    }

    #[test]
    fn per_seed_outputs_do_not_depend_on_schedule() {
        let p = plan(vec![1.0, 2.0], 3);
        let r = run_sweep(&p).unwrap();
        let single = run_one(&p, 1, 2).unwrap();
        assert_eq!(r.results[5], single);
        assert_eq!(r.cell(1).count(), 3);
        assert_ne!(r.results[3].seed, r.results[0].seed);
    }

    #[test]
    fn coupled_sizes_share_seeds() {
        let mut p = plan(vec![1.0, 2.0], 2);
        p.couple_sizes = true;
        assert_eq!(p.run_seed(0, 1), p.run_seed(1, 1));
        assert_ne!(p.run_seed(0, 0), p.run_seed(0, 1));
    }

    #[test]
    fn seed_prefix_of_a_coupled_sweep_is_the_smaller_sweep() {
        let mut p = plan(vec![1.0, 2.0], 3);
        p.couple_sizes = true;
        let full = run_sweep(&p).unwrap();
        p.seeds = 2;
        assert_eq!(full.first_seeds(2).unwrap(), run_sweep(&p).unwrap());
        assert!(full.first_seeds(0).is_err() && full.first_seeds(4).is_err());
    }

    #[test]
    fn cell_dims_follow_the_path() {
        let mut p = plan(vec![2.0], 1);
        p.path = [0.0, 1.0, 2.0];
        let d = p.dims(0).unwrap();
        assert_eq!((d.n, d.e, d.n_e), (8, 4, 16));
    }

    #[test]
    fn probe_values_match_direct_kernels() {
        let p = plan(vec![1.0], 1);
        let r = run_sweep(&p).unwrap();
        let mut cfg = p.train_config(0, 0).unwrap();
        cfg.retention = Retention::Fields;
        let t = run_trajectory(&cfg).unwrap();
        let fr = Frames::from_trace(&t, &crate::kernels::KernelGrid::every_step()).unwrap();
        let (h0, _, _) = global_kernels(&fr, false);
        assert_eq!(r.results[0].observables[0], h0.at(0, 1, 6, 6).unwrap());
        let m = mixture_kernels(&fr, true);
        assert_eq!(r.results[0].observables[1], m.a.get(2, 6));
        assert_eq!(r.observable_index("MAt[2,2,6,6]").unwrap(), 1);
    }

    #[test]
    fn divergence_is_recorded() {
        let mut p = plan(vec![1.0, 2.0], 2);
        p.base.hyper.lrs = crate::dynamics::LearningRates::uniform(1e6);
        let r = run_sweep(&p).unwrap();
        assert!(r.results.iter().all(|c| c.diverged.is_some()));
        assert!(r.results[0].observables[0].is_nan());
        assert!(r.mean_loss(0).is_err());
    }

    #[test]
    fn bad_plans_are_config_errors() {
        let mut p = plan(vec![1.0], 1);
        p.scheme = "sp".into();
        assert!(matches!(run_sweep(&p), Err(Error::Config(_))));
        let mut p = plan(vec![1.0], 1);
        p.probes.push(KernelProbe::new("MA", 0, 1, 2, 2));
        assert!(run_sweep(&p).is_err());
        let mut p = plan(vec![1.0], 1);
        p.probes.push(KernelProbe::new("H0", 0, 0, 7, 0));
        assert!(run_sweep(&p).is_err());
    }

    #[test]
    fn lr_grid_is_half_decades() {
        let g = lr_grid(1.0, 7);
        assert_eq!(g.len(), 7);
        assert!((g[3] - 1.0).abs() < 1e-15);
        assert!((g[4] / g[3] - 10f64.sqrt()).abs() < 1e-12);
        assert!((g[0] - 10f64.powf(-1.5)).abs() < 1e-12);
    }
}
