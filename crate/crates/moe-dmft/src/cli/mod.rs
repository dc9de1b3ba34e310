//! Run configuration, environment overrides and the five commands.
//!
//! A run is described by one TOML document. Keys are overridden by
//! environment variables `MOE_DMFT_<KEY>` where nested keys are joined by
//! `__` (`MOE_DMFT_MODEL__N=128` sets `model.n`), and then by the command
//! line flags. Unknown keys are rejected after all overrides are applied.

mod commands;
mod output;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{BiasMode, LearningRates, Retention};
use crate::error::{Error, Result};
use crate::kernels::KernelGrid;
use crate::meanfield::{MeanFieldRates, Populations, ProbeMode};
use crate::model::{Activations, Dataset, GateMode, InitScheme, LossKind, ModelDims};
use crate::scaling::{KernelProbe, StateProbe};
use crate::volterra::Tolerance;

pub use commands::{cmd_compare, cmd_dmft, cmd_sweep, cmd_train, cmd_verify, dmft_config, sweep_plan, CompareRow};
pub use output::{read_kernel_csv, KernelKey};

/// Prefix of environment overrides.
pub const ENV_PREFIX: &str = "MOE_DMFT_";

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Where the inputs come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    /// Random unit inputs with a polynomial teacher; `D` and `P` come from the model.
    Probe { seed: u64 },
    /// Explicit inputs, one row per datum.
    Inline { x: Vec<Vec<f64>>, y: Vec<f64> },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Probe { seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSettings {
    #[serde(default)]
    pub grid: KernelGrid,
    /// Emit `G̃` and `Ã`-based mixtures instead of `G` and `A`.
    #[serde(default = "yes")]
    pub tilde: bool,
}

impl Default for KernelSettings {
    fn default() -> Self {
        KernelSettings { grid: KernelGrid::default(), tilde: true }
    }
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmftSettings {
    pub rates: MeanFieldRates,
    #[serde(default)]
    pub pops: Populations,
    #[serde(default)]
    pub probes: ProbeMode,
    #[serde(default)]
    pub alpha_star: f64,
    #[serde(default = "one")]
    pub damping: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "yes")]
    pub frozen_noise: bool,
}

fn one() -> f64 {
    1.0
}
fn default_max_iter() -> usize {
    50
}
fn default_tol() -> f64 {
    1e-4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSettings {
    pub scheme: String,
    pub scales: Vec<f64>,
    #[serde(default = "unit_path")]
    pub path: [f64; 3],
    pub seeds: usize,
    #[serde(default)]
    pub couple_sizes: bool,
    #[serde(default)]
    pub probes: Vec<KernelProbe>,
    #[serde(default)]
    pub states: Vec<StateProbe>,
}

fn unit_path() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

/// Fully resolved description of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream is derived from it by label.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Worker threads, 0 for one per core.
    #[serde(default)]
    pub threads: usize,
    pub model: ModelDims,
    #[serde(default)]
    pub activations: Activations,
    #[serde(default)]
    pub gate: GateMode,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub bias: BiasMode,
    #[serde(default)]
    pub retention: Retention,
    #[serde(default)]
    pub init: InitScheme,
    #[serde(default = "unit_rates")]
    pub lrs: LearningRates,
    /// Scaling scheme. When set, `init` and `lrs` are base values at unit size.
    #[serde(default)]
    pub parameterization: Option<String>,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub kernels: KernelSettings,
    #[serde(default)]
    pub verify: Tolerance,
    #[serde(default)]
    pub dmft: Option<DmftSettings>,
    #[serde(default)]
    pub sweep: Option<SweepSettings>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn unit_rates() -> LearningRates {
    LearningRates::uniform(1.0)
}

/// Flag values that take precedence over the file and the environment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl RunConfig {
    /// Parse a TOML document, apply `env` overrides and then `flags`.
    pub fn resolve(text: &str, env: &BTreeMap<String, String>, flags: &Overrides) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        for (key, raw) in env {
            let Some(path) = key.strip_prefix(ENV_PREFIX) else { continue };
            let path: Vec<String> = path.split("__").map(|p| p.to_ascii_lowercase()).collect();
            if path.iter().any(|p| p.is_empty()) {
                return Err(Error::config(format!("malformed override `{key}`")));
            }
            set_path(&mut doc, &path, parse_scalar(raw))?;
        }
        if let Some(s) = flags.seed {
            doc.insert("seed".into(), toml::Value::Integer(to_toml_int(s)?));
        }
        if let Some(o) = &flags.out {
            doc.insert("out".into(), toml::Value::String(o.to_string_lossy().into_owned()));
        }
        if let Some(t) = flags.threads {
            doc.insert("threads".into(), toml::Value::Integer(t as i64));
        }
        let cfg: RunConfig = toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// [`RunConfig::resolve`] on a file with the process environment.
    pub fn load(path: &Path, flags: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config `{}`: {e}", path.display())))?;
        let env: BTreeMap<String, String> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        Self::resolve(&text, &env, flags)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate(self.gate)?;
        self.init.validate()?;
        self.lrs.validate()?;
        if let Some(name) = &self.parameterization {
            crate::scaling::Parameterization::named(name)?;
        }
        if self.verify.per_step.is_nan() || self.verify.per_step < 0.0 {
            return Err(Error::config("verify.per_step must be non-negative"));
        }
        if let DataSpec::Inline { x, y } = &self.data {
            if x.len() != self.model.p || x.iter().any(|r| r.len() != self.model.d) || y.len() != self.model.p {
                return Err(Error::config(format!(
                    "inline data must hold P = {} rows of D = {} inputs and P labels",
                    self.model.p, self.model.d
                )));
            }
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data {
            DataSpec::Probe { seed } => Ok(Dataset::probe_task(self.model.d, self.model.p, *seed)),
            DataSpec::Inline { x, y } => Dataset::from_rows(x, y),
        }
    }

    /// The document written next to every run's outputs.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

fn to_toml_int(v: u64) -> Result<i64> {
    i64::try_from(v).map_err(|_| Error::config(format!("{v} does not fit a TOML integer")))
}

/// An override value: a TOML literal if it parses as one, else a bare string.
fn parse_scalar(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(doc: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = doc;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override path crosses the non-table key `{p}`")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}
