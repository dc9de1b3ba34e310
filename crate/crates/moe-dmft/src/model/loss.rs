use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Per-datum loss `ℓ(f, y)` with its derivative in `f`.
pub trait LossHook: Send + Sync {
    fn value(&self, f: f64, y: f64) -> f64;
    fn deriv(&self, f: f64, y: f64) -> f64;
}

#[derive(Clone, Default)]
pub enum LossKind {
    /// `ℓ = ½ (f − y)²`.
    #[default]
    HalfMse,
    Custom(Arc<dyn LossHook>),
}

impl LossKind {
    pub fn custom(h: impl LossHook + 'static) -> Self {
        LossKind::Custom(Arc::new(h))
    }

    pub fn value(&self, f: f64, y: f64) -> f64 {
        match self {
            LossKind::HalfMse => 0.5 * (f - y) * (f - y),
            LossKind::Custom(h) => h.value(f, y),
        }
    }

    pub fn deriv(&self, f: f64, y: f64) -> f64 {
        match self {
            LossKind::HalfMse => f - y,
            LossKind::Custom(h) => h.deriv(f, y),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::HalfMse => "half-mse",
            LossKind::Custom(_) => "custom",
        }
    }
}

impl fmt::Debug for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl PartialEq for LossKind {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (LossKind::HalfMse, LossKind::HalfMse) => true,
            (LossKind::Custom(a), LossKind::Custom(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

impl Serialize for LossKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for LossKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        match s.as_str() {
            "half-mse" => Ok(LossKind::HalfMse),
            _ => Err(serde::de::Error::custom(format!("unknown loss `{s}`"))),
        }
    }
}

/// Mean loss `L = (1/P) Σ ℓ(f_μ, y_μ)` and training signal `Δ_μ = −∂ℓ/∂f`.
pub fn loss_and_delta(f: &DVector<f64>, y: &DVector<f64>, kind: &LossKind) -> Result<(f64, DVector<f64>)> {
    if f.len() != y.len() {
        return Err(Error::Shape(format!("{} outputs vs {} labels", f.len(), y.len())));
    }
    if f.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow { field: "f", datum: f.iter().position(|v| !v.is_finite()).unwrap_or(0) });
    }
    let p = f.len() as f64;
    let loss = f.iter().zip(y.iter()).map(|(&a, &b)| kind.value(a, b)).sum::<f64>() / p;
    let delta = DVector::from_iterator(f.len(), f.iter().zip(y.iter()).map(|(&a, &b)| -kind.deriv(a, b)));
    Ok((loss, delta))
}
