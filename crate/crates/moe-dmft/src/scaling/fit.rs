use serde::{Deserialize, Serialize};

use super::sweep::SweepReport;
use crate::error::{Error, Result};

/// Least-squares line through `(log size, log value)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub observable: String,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// `(size, value)` before taking logs.
    pub points: Vec<(f64, f64)>,
}

/// Fit `log v = intercept + slope · log size` over at least three sizes.
///
/// All-zero values give slope 0 and intercept `-∞`. A mix of zero and
/// non-zero values has no log-log fit.
pub fn log_log_fit(observable: &str, sizes: &[f64], values: &[f64]) -> Result<RateFit> {
    if sizes.len() != values.len() {
        return Err(Error::Shape(format!("{} sizes but {} values", sizes.len(), values.len())));
    }
    if sizes.len() < 3 {
        return Err(Error::config(format!("a rate fit needs at least 3 sizes, got {}", sizes.len())));
    }
    if sizes.iter().any(|s| !(s.is_finite() && *s > 0.0)) || values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::config("sizes must be positive and values non-negative"));
    }
    let points: Vec<(f64, f64)> = sizes.iter().copied().zip(values.iter().copied()).collect();
    if values.iter().all(|&v| v == 0.0) {
        return Ok(RateFit { observable: observable.into(), slope: 0.0, intercept: f64::NEG_INFINITY, r2: 1.0, points });
    }
    if values.contains(&0.0) {
        return Err(Error::Conditioning(format!("`{observable}` is exactly zero at some sizes only")));
    }
    let x: Vec<f64> = sizes.iter().map(|s| s.ln()).collect();
    let y: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let (slope, intercept, r2) = least_squares(&x, &y).ok_or_else(|| Error::config("sizes must not all be equal"))?;
    Ok(RateFit { observable: observable.into(), slope, intercept, r2, points })
}

/// Ordinary least squares `y = a + b x`, returned as `(b, a, R²)`; `None`
/// when `x` is constant.
pub(crate) fn least_squares(x: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Some((slope, intercept, r2))
}

/// Unbiased sample standard deviation.
pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Minimum finished seeds per size for [`concentration_fit`].
pub const MIN_SEEDS: usize = 4;

/// Across-seed standard deviation of a recorded observable per size, fitted
/// on a log-log scale against the sweep scale factor. Diverged runs are
/// left out.
pub fn concentration_fit(report: &SweepReport, observable: &str) -> Result<RateFit> {
    concentration_fit_group(report, &[observable], observable)
}

/// As [`concentration_fit`] for a group of entries of one field: the
/// dispersion at each size is the root mean square of the entries'
/// across-seed standard deviations.
pub fn concentration_fit_group(report: &SweepReport, observables: &[&str], label: &str) -> Result<RateFit> {
    if observables.is_empty() {
        return Err(Error::config("no observables to fit"));
    }
    let idx = observables.iter().map(|o| report.observable_index(o)).collect::<Result<Vec<_>>>()?;
    let mut sizes = Vec::new();
    let mut disp = Vec::new();
    for (c, &s) in report.plan.scales.iter().enumerate() {
        let runs: Vec<_> = report.cell(c).filter(|r| r.diverged.is_none()).collect();
        if runs.len() < MIN_SEEDS {
            return Err(Error::config(format!(
                "scale {s}: {} finished seeds, concentration fits need {MIN_SEEDS}",
                runs.len()
            )));
        }
        let ms = idx
            .iter()
            .map(|&i| sample_std(&runs.iter().map(|r| r.observables[i]).collect::<Vec<_>>()).powi(2))
            .sum::<f64>()
            / idx.len() as f64;
        sizes.push(s);
        disp.push(ms.sqrt());
    }
    log_log_fit(label, &sizes, &disp)
}

/// `max_{n ≤ horizon} |L_scaled(n) − L_base(n)| / max(|L_base(n)|, 1e-12)`.
pub fn collapse_metric(base: &[f64], scaled: &[f64], horizon: usize) -> Result<f64> {
    if base.len() <= horizon || scaled.len() <= horizon {
        return Err(Error::Shape(format!(
            "horizon {horizon} needs {} points, curves have {} and {}",
            horizon + 1,
            base.len(),
            scaled.len()
        )));
    }
    let worst = (0..=horizon)
        .map(|n| {
            let r = (scaled[n] - base[n]).abs() / base[n].abs().max(1e-12);
            if r.is_nan() {
                f64::INFINITY
            } else {
                r
            }
        })
        .fold(0.0, f64::max);
    Ok(worst)
}
