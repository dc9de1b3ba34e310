//! Scalar nonlinearities with analytic first and second derivatives.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::function::erf::erf;

/// User-supplied scalar map. The second derivative defaults to a central
/// difference of `deriv`.
pub trait ScalarMap: Send + Sync {
    fn value(&self, x: f64) -> f64;
    fn deriv(&self, x: f64) -> f64;
    fn second(&self, x: f64) -> f64 {
        let h = 1e-5;
        (self.deriv(x + h) - self.deriv(x - h)) / (2.0 * h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActKind {
    Identity,
    Tanh,
    Gelu,
    /// Softplus, `ln(1 + e^x)`.
    ReluSmooth,
}

impl ActKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Self::Identity),
            "tanh" => Some(Self::Tanh),
            "gelu" => Some(Self::Gelu),
            "relu-smooth" | "softplus" => Some(Self::ReluSmooth),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Tanh => "tanh",
            Self::Gelu => "gelu",
            Self::ReluSmooth => "relu-smooth",
        }
    }
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone)]
pub enum Activation {
    Builtin(ActKind),
    Custom(Arc<dyn ScalarMap>),
}

impl Activation {
    pub const IDENTITY: Activation = Activation::Builtin(ActKind::Identity);
    pub const TANH: Activation = Activation::Builtin(ActKind::Tanh);

    pub fn custom(map: impl ScalarMap + 'static) -> Self {
        Activation::Custom(Arc::new(map))
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match self {
            Activation::Builtin(k) => match k {
                ActKind::Identity => x,
                ActKind::Tanh => x.tanh(),
                ActKind::Gelu => x * normal_cdf(x),
                ActKind::ReluSmooth => {
                    if x > 30.0 {
                        x
                    } else {
                        x.exp().ln_1p()
                    }
                }
            },
            Activation::Custom(m) => m.value(x),
        }
    }

    #[inline]
    pub fn deriv(&self, x: f64) -> f64 {
        match self {
            Activation::Builtin(k) => match k {
                ActKind::Identity => 1.0,
                ActKind::Tanh => {
                    let t = x.tanh();
                    1.0 - t * t
                }
                ActKind::Gelu => normal_cdf(x) + x * normal_pdf(x),
                ActKind::ReluSmooth => logistic(x),
            },
            Activation::Custom(m) => m.deriv(x),
        }
    }

    #[inline]
    pub fn second(&self, x: f64) -> f64 {
        match self {
            Activation::Builtin(k) => match k {
                ActKind::Identity => 0.0,
                ActKind::Tanh => {
                    let t = x.tanh();
                    -2.0 * t * (1.0 - t * t)
                }
                ActKind::Gelu => normal_pdf(x) * (2.0 - x * x),
                ActKind::ReluSmooth => {
                    let s = logistic(x);
                    s * (1.0 - s)
                }
            },
            Activation::Custom(m) => m.second(x),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Builtin(k) => k.name(),
            Activation::Custom(_) => "custom",
        }
    }

    /// Largest gap between `deriv` and a central difference of `value` over
    /// `grid`, relative to `max(|φ'|, 1)`.
    pub fn derivative_error(&self, grid: &[f64], h: f64) -> f64 {
        grid.iter()
            .map(|&x| {
                let fd = (self.value(x + h) - self.value(x - h)) / (2.0 * h);
                let d = self.deriv(x);
                (d - fd).abs() / d.abs().max(1.0)
            })
            .fold(0.0, f64::max)
    }

    /// Same check for the second derivative against differences of `deriv`.
    pub fn second_derivative_error(&self, grid: &[f64], h: f64) -> f64 {
        grid.iter()
            .map(|&x| {
                let fd = (self.deriv(x + h) - self.deriv(x - h)) / (2.0 * h);
                let d = self.second(x);
                (d - fd).abs() / d.abs().max(1.0)
            })
            .fold(0.0, f64::max)
    }
}

/// Default probe grid for derivative checks.
pub fn probe_grid() -> Vec<f64> {
    (-16..=16).map(|i| i as f64 * 0.25).collect()
}

impl fmt::Debug for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl PartialEq for Activation {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Activation::Builtin(a), Activation::Builtin(b)) => a == b,
            (Activation::Custom(a), Activation::Custom(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

impl Serialize for Activation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Activation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ActKind::parse(&s)
            .map(Activation::Builtin)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown activation `{s}`")))
    }
}

/// Residual/expert nonlinearity φ and routing map σ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Activations {
    pub phi: Activation,
    pub sigma: Activation,
}

impl Default for Activations {
    fn default() -> Self {
        Activations { phi: Activation::TANH, sigma: Activation::TANH }
    }
}

impl Activations {
    pub fn identity() -> Self {
        Activations { phi: Activation::IDENTITY, sigma: Activation::IDENTITY }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALL: [ActKind; 4] = [ActKind::Identity, ActKind::Tanh, ActKind::Gelu, ActKind::ReluSmooth];

    #[test]
    fn builtin_derivatives_match_differences() {
        let grid = probe_grid();
        for k in ALL {
            let a = Activation::Builtin(k);
            assert!(a.derivative_error(&grid, 1e-5) < 1e-6, "{k:?}");
            assert!(a.second_derivative_error(&grid, 1e-5) < 1e-5, "{k:?}");
        }
    }

    #[test]
    fn known_values() {
        assert_eq!(Activation::IDENTITY.value(3.0), 3.0);
        assert!((Activation::Builtin(ActKind::Gelu).value(0.0)).abs() < 1e-15);
        assert!((Activation::Builtin(ActKind::ReluSmooth).value(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((Activation::Builtin(ActKind::ReluSmooth).value(50.0) - 50.0).abs() < 1e-12);
    }

    struct Cube;
    impl ScalarMap for Cube {
        fn value(&self, x: f64) -> f64 {
            x * x * x
        }
        fn deriv(&self, x: f64) -> f64 {
            3.0 * x * x
        }
    }

    #[test]
    fn custom_hook_default_second_derivative() {
        let a = Activation::custom(Cube);
        assert!((a.second(2.0) - 12.0).abs() < 1e-6);
        assert!(a.derivative_error(&probe_grid(), 1e-5) < 1e-6);
    }

    #[test]
    fn names_round_trip() {
        for k in ALL {
            assert_eq!(ActKind::parse(k.name()), Some(k));
        }
        let s = serde_json::to_string(&Activations::default()).unwrap();
        let back: Activations = serde_json::from_str(&s).unwrap();
        assert_eq!(back, Activations::default());
    }
}
