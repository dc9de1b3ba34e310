use std::io::{Read, Write};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{BiasMode, LearningRates};
use crate::error::{Error, Result};
use crate::model::{Dataset, FieldState, LossKind, Model, ParamState};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// What a trajectory keeps per step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Retention {
    /// Parameters and fields at every step.
    #[default]
    Full,
    /// Fields only.
    Fields,
    /// Scalars only.
    Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub loss: f64,
    pub drive: DVector<f64>,
    pub loads: DVector<f64>,
    /// Frobenius norms (W0, W1, W2, w3, r, b).
    pub norms: [f64; 6],
    pub params: Option<ParamState>,
    pub fields: Option<FieldState>,
}

impl StepRecord {
    pub fn mean_abs_drive(&self) -> f64 {
        self.drive.iter().map(|v| v.abs()).sum::<f64>() / self.drive.len().max(1) as f64
    }
}

/// Trajectory record `n = 0..=steps` plus everything needed to re-evaluate it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub schema_version: u32,
    pub model: Model,
    pub data: Dataset,
    pub lrs: LearningRates,
    pub bias: BiasMode,
    pub loss_kind: LossKind,
    pub retention: Retention,
    pub init: ParamState,
    pub records: Vec<StepRecord>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn fields(&self, n: usize) -> Result<&FieldState> {
        self.records
            .get(n)
            .and_then(|r| r.fields.as_ref())
            .ok_or_else(|| Error::Capability(format!("trace holds no fields at step {n}")))
    }

    pub fn params(&self, n: usize) -> Result<&ParamState> {
        self.records
            .get(n)
            .and_then(|r| r.params.as_ref())
            .ok_or_else(|| Error::Capability(format!("trace holds no parameters at step {n}")))
    }

    pub fn require(&self, level: Retention) -> Result<()> {
        let ok = match level {
            Retention::Full => self.records.iter().all(|r| r.params.is_some() && r.fields.is_some()),
            Retention::Fields => self.records.iter().all(|r| r.fields.is_some()),
            Retention::Summary => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Capability(format!("trace retention {:?} does not provide {:?} snapshots", self.retention, level)))
        }
    }

    /// Compact binary snapshot with the schema version up front.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"MOET")?;
        w.write_all(&TRACE_SCHEMA_VERSION.to_le_bytes())?;
        bincode::serialize_into(w, self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic[..4] != b"MOET" {
            return Err(Error::Serde("not a trace snapshot".into()));
        }
        let v = u32::from_le_bytes(magic[4..].try_into().unwrap());
        if v != TRACE_SCHEMA_VERSION {
            return Err(Error::Serde(format!("trace schema {v}, expected {TRACE_SCHEMA_VERSION}")));
        }
        bincode::deserialize_from(r).map_err(|e| Error::Serde(e.to_string()))
    }
}
