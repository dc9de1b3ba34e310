use serde::{Deserialize, Serialize};

use super::fit::least_squares;
use crate::error::{Error, Result};
use crate::model::ModelDims;

/// Kind of large-size limit, set by `α★ = lim N / (E·N_e)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// `α★ = 0`: deterministic limit.
    Ode,
    /// `0 < α★ < ∞`: finite-expert noise survives with variance scale `α★`.
    Sde { alpha_star: f64 },
    Unstable,
}

/// Growth law `X(s) = c_X · s^{a_X}` for `X ∈ {N, E, N_e}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthLaw {
    pub n: (f64, f64),
    pub e: (f64, f64),
    pub n_e: (f64, f64),
}

/// Exact regime of a symbolic growth law.
pub fn classify_growth(law: &GrowthLaw) -> Result<Regime> {
    let parts = [law.n, law.e, law.n_e];
    if parts.iter().any(|(c, a)| !(c.is_finite() && *c > 0.0 && a.is_finite())) {
        return Err(Error::config("growth constants must be positive and exponents finite"));
    }
    if law.n.1 + law.e.1 + law.n_e.1 <= 0.0 {
        return Err(Error::config("the growth law does not grow"));
    }
    let a = law.n.1 - law.e.1 - law.n_e.1;
    Ok(if a < 0.0 {
        Regime::Ode
    } else if a > 0.0 {
        Regime::Unstable
    } else {
        Regime::Sde { alpha_star: law.n.0 / (law.e.0 * law.n_e.0) }
    })
}

/// Slopes of `log α★` against `log(N·E·N_e)` within this band count as flat.
pub const FLAT_SLOPE: f64 = 0.05;

/// Regime of a finite sequence of growing models.
///
/// The ratio `N/(E·N_e)` is fitted against the total size on a log-log
/// scale. A flat fit means an SDE limit, reported with the last ratio.
/// Multiplying every dimension by one constant shifts both axes and leaves
/// the slope unchanged.
pub fn classify_limit(seq: &[ModelDims]) -> Result<Regime> {
    if seq.len() < 2 {
        return Err(Error::config("classifying a limit needs at least two models"));
    }
    let size: Vec<f64> = seq.iter().map(|d| (d.n * d.e * d.n_e) as f64).collect();
    if size.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("model sizes N·E·N_e must increase along the sequence"));
    }
    let ratio: Vec<f64> = seq.iter().map(|d| d.n as f64 / (d.e * d.n_e) as f64).collect();
    let lx: Vec<f64> = size.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ratio.iter().map(|v| v.ln()).collect();
    let (slope, _, _) = least_squares(&lx, &ly).expect("sizes are strictly increasing");
    Ok(if slope < -FLAT_SLOPE {
        Regime::Ode
    } else if slope > FLAT_SLOPE {
        Regime::Unstable
    } else {
        Regime::Sde { alpha_star: *ratio.last().unwrap() }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(f: impl Fn(usize) -> (usize, usize, usize)) -> Vec<ModelDims> {
        (0..5)
            .map(|i| {
                let (n, e, ne) = f(1 << i);
                ModelDims::new(2, n, e, ne, 2)
            })
            .collect()
    }

    #[test]
    fn more_experts_at_fixed_ratio_is_ode() {
        assert_eq!(classify_limit(&seq(|s| (16 * s, 2 * s, 8 * s))).unwrap(), Regime::Ode);
        assert_eq!(classify_limit(&seq(|s| (16, 2 * s, 8))).unwrap(), Regime::Ode);
    }

    #[test]
    fn constant_ratio_is_sde() {
        assert_eq!(classify_limit(&seq(|s| (12 * s, 2 * s, 2))).unwrap(), Regime::Sde { alpha_star: 3.0 });
    }

    #[test]
    fn width_only_is_unstable() {
        assert_eq!(classify_limit(&seq(|s| (16 * s, 4, 8))).unwrap(), Regime::Unstable);
    }

    #[test]
    fn symbolic_laws() {
        let law = |n, e, ne| GrowthLaw { n: (3.0, n), e: (1.0, e), n_e: (1.0, ne) };
        assert_eq!(classify_growth(&law(1.0, 1.0, 1.0)).unwrap(), Regime::Ode);
        assert_eq!(classify_growth(&law(1.0, 1.0, 0.0)).unwrap(), Regime::Sde { alpha_star: 3.0 });
        assert_eq!(classify_growth(&law(1.0, 0.0, 0.0)).unwrap(), Regime::Unstable);
        assert!(classify_growth(&law(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn rejects_short_or_shrinking_sequences() {
        assert!(classify_limit(&seq(|s| (s, 1, 1))[..1]).is_err());
        let mut v = seq(|s| (4 * s, 2, 2));
        v.reverse();
        assert!(classify_limit(&v).is_err());
    }
}
