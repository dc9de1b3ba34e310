//! Mean-field (DMFT) limit of the mixture-of-experts residual model.
//!
//! Three nested single-site processes are sampled by Monte Carlo and closed
//! self-consistently through their kernels:
//!
//! * residual site: `h0`, `h3`, `g̃ = w3 φ'(h3)` and the readout weight `w3`,
//!   one population evolving in lockstep because the output `f` is its mean;
//! * expert site: router logit `p`, bias `b`, gate `w`, alignment `Ã`;
//! * within site: `u = χ + …`, `z = ξ + …`, `g¹ = φ'(u) z`, with `χ` and `ξ`
//!   Gaussian processes with covariances `s1² C_h` and `s2² C_g`.
//!
//! Everything is in rescaled units: `g̃ = N g`, `Ã = N A`, and the learning
//! rates are the width-free coefficients of [`MeanFieldRates`]. The router
//! starts at zero. Time and data share a flat index `n·P + μ` of length
//! `T = (steps + 1)·P`.

mod expert;
mod gp;
mod residual;

pub use expert::{sample_expert_site, sample_within_site, ExpertSample, WithinSample};
pub use gp::{psd_cholesky, sample_rows, sample_rows_matched, JITTER_LADDER};
pub use residual::{sample_residual_site, ResidualSample};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{top_indices, BiasMode};
use crate::error::{Error, Result};
use crate::kernels::TwoTimeKernel;
use crate::model::{Activations, Dataset, GateMode, InitScheme, LossKind};
use crate::seed;

/// Width-free learning-rate coefficients `(c0, c1, c2, c3, c_r, c_b)`;
/// `gamma0` multiplies all of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanFieldRates {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c_r: f64,
    pub c_b: f64,
    #[serde(default = "one")]
    pub gamma0: f64,
}

fn one() -> f64 {
    1.0
}

impl MeanFieldRates {
    pub fn uniform(c: f64) -> Self {
        MeanFieldRates { c0: c, c1: c, c2: c, c3: c, c_r: c, c_b: c, gamma0: 1.0 }
    }

    pub fn effective(&self) -> [f64; 6] {
        [self.c0, self.c1, self.c2, self.c3, self.c_r, self.c_b].map(|c| c * self.gamma0)
    }
}

/// How the pathwise sensitivities are estimated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProbeMode {
    /// `count` independent ±1 probe vectors per within sample.
    Rademacher { count: usize },
    /// One basis probe per flat index; exact but costs `T` tangent passes.
    Exact,
}

impl Default for ProbeMode {
    fn default() -> Self {
        ProbeMode::Rademacher { count: 1 }
    }
}

/// Monte Carlo population sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Populations {
    pub residual: usize,
    pub experts: usize,
    /// Within samples per expert sample.
    pub within: usize,
    /// Upper bound on `experts · within`.
    #[serde(default = "default_cap")]
    pub cap: usize,
}

fn default_cap() -> usize {
    1 << 20
}

impl Default for Populations {
    fn default() -> Self {
        Populations { residual: 4096, experts: 4096, within: 64, cap: default_cap() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmftConfig {
    pub data: Dataset,
    pub act: Activations,
    pub loss: LossKind,
    pub gate: GateMode,
    pub kappa: f64,
    /// `N_e / N`.
    pub alpha: f64,
    pub steps: usize,
    pub dt: f64,
    pub rates: MeanFieldRates,
    /// `sr` is ignored: the router starts at zero.
    pub init: InitScheme,
    pub bias: BiasMode,
    pub pops: Populations,
    pub probes: ProbeMode,
    /// Variance scale of the finite-expert noise terms; 0 gives the ODE limit.
    pub alpha_star: f64,
    pub damping: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    /// Reuse the same random numbers in every iteration.
    pub frozen_noise: bool,
}

impl DmftConfig {
    pub fn new(data: Dataset, steps: usize, dt: f64, rates: MeanFieldRates) -> Self {
        DmftConfig {
            data,
            act: Activations::default(),
            loss: LossKind::default(),
            gate: GateMode::Soft,
            kappa: 1.0,
            alpha: 1.0,
            steps,
            dt,
            rates,
            init: InitScheme::router_zero(),
            bias: BiasMode::Gradient,
            pops: Populations::default(),
            probes: ProbeMode::default(),
            alpha_star: 0.0,
            damping: 1.0,
            max_iter: 50,
            tol: 1e-6,
            seed: 0,
            frozen_noise: true,
        }
    }

    pub fn p(&self) -> usize {
        self.data.len()
    }

    pub fn nt(&self) -> usize {
        self.steps + 1
    }

    /// Length of the flat time-data index.
    pub fn flat_len(&self) -> usize {
        self.nt() * self.p()
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.dt) || !pos(self.alpha) {
            return Err(Error::config("dt and alpha must be positive"));
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::config(format!("kappa = {} must lie in (0, 1]", self.kappa)));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::config(format!("damping = {} must lie in (0, 1]", self.damping)));
        }
        if !(self.alpha_star >= 0.0 && self.alpha_star.is_finite()) || !(self.tol >= 0.0) {
            return Err(Error::config("alpha_star and tol must be non-negative"));
        }
        let r = self.rates.effective();
        if r.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config("rate coefficients must be finite and non-negative"));
        }
        self.init.validate()?;
        let pp = &self.pops;
        if pp.residual < 2 || pp.experts < 2 || pp.within < 2 {
            return Err(Error::config("every population needs at least 2 samples"));
        }
        if pp.experts.saturating_mul(pp.within) > pp.cap {
            return Err(Error::config(format!(
                "{} experts × {} within samples exceeds the budget {}",
                pp.experts, pp.within, pp.cap
            )));
        }
        if let ProbeMode::Rademacher { count: 0 } = self.probes {
            return Err(Error::config("at least one probe is needed"));
        }
        if let BiasMode::Balance { eta_bias } = self.bias {
            if !(eta_bias.is_finite() && eta_bias >= 0.0) {
                return Err(Error::config("eta_bias must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Order parameters on the full time grid. Two-time objects are T×T with
/// flat index `n·P + μ`; one-time objects are P×(steps+1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmftKernels {
    pub p: usize,
    pub steps: usize,
    /// `⟨h0 h0⟩`.
    pub c_h: DMatrix<f64>,
    /// `⟨g̃ g̃⟩`.
    pub c_g: DMatrix<f64>,
    /// `⟨φ(h3) φ(h3)⟩`.
    pub c_phi3: DMatrix<f64>,
    /// Gate-weighted expert averages `⟨w w Φ¹⟩`, `⟨w w Ψ⟩`, `⟨Ã dw Ã dw⟩`.
    pub m_phi: DMatrix<f64>,
    pub m_psi: DMatrix<f64>,
    pub m_aa: DMatrix<f64>,
    /// `⟨Ã dw⟩`.
    pub m_a: DMatrix<f64>,
    /// `⟨w(n) ∂φ(u(n))/∂ξ(m)⟩`, strictly causal; row is the effect.
    pub r_phixi: DMatrix<f64>,
    /// `⟨w(n) ∂g¹(n)/∂χ(m)⟩`, causal with an equal-time diagonal.
    pub r_gchi: DMatrix<f64>,
    /// Output and training signal `Δ = −∂ℓ/∂f`.
    pub f: DMatrix<f64>,
    pub delta: DMatrix<f64>,
    /// Top-K routing threshold per datum and step.
    pub q_star: Option<DMatrix<f64>>,
    pub active_fraction: Option<DMatrix<f64>>,
}

impl DmftKernels {
    /// Untrained state: static input kernel, zero everything learned, `f = 0`.
    pub fn initial(cfg: &DmftConfig) -> Self {
        let (p, nt, t) = (cfg.p(), cfg.nt(), cfg.flat_len());
        let s0 = cfg.init.s0 * cfg.init.s0 / cfg.data.dim() as f64;
        let c_h = DMatrix::from_fn(t, t, |i, j| s0 * cfg.data.kx[(i % p, j % p)]);
        let f = DMatrix::zeros(p, nt);
        let delta = DMatrix::from_fn(p, nt, |mu, _| -cfg.loss.deriv(0.0, cfg.data.y[mu]));
        let z = || DMatrix::zeros(t, t);
        DmftKernels {
            p,
            steps: cfg.steps,
            c_h,
            c_g: z(),
            c_phi3: z(),
            m_phi: z(),
            m_psi: z(),
            m_aa: z(),
            m_a: DMatrix::zeros(p, nt),
            r_phixi: z(),
            r_gchi: z(),
            f,
            delta,
            q_star: None,
            active_fraction: None,
        }
    }

    fn parts(&self) -> [&DMatrix<f64>; 11] {
        [
            &self.c_h,
            &self.c_g,
            &self.c_phi3,
            &self.m_phi,
            &self.m_psi,
            &self.m_aa,
            &self.m_a,
            &self.r_phixi,
            &self.r_gchi,
            &self.f,
            &self.delta,
        ]
    }

    /// Largest entrywise difference over every order parameter.
    pub fn max_change(&self, other: &Self) -> f64 {
        self.parts()
            .iter()
            .zip(other.parts())
            .map(|(a, b)| (*a - b).amax())
            .fold(0.0, |m, v| if v.is_nan() { f64::INFINITY } else { m.max(v) })
    }

    /// `(1 − ρ) self + ρ new`.
    pub fn damp(&self, new: &Self, rho: f64) -> Self {
        let mix = |a: &DMatrix<f64>, b: &DMatrix<f64>| a * (1.0 - rho) + b * rho;
        let mix_opt = |a: &Option<DMatrix<f64>>, b: &Option<DMatrix<f64>>| match (a, b) {
            (Some(a), Some(b)) => Some(mix(a, b)),
            (_, b) => b.clone(),
        };
        DmftKernels {
            p: self.p,
            steps: self.steps,
            c_h: mix(&self.c_h, &new.c_h),
            c_g: mix(&self.c_g, &new.c_g),
            c_phi3: mix(&self.c_phi3, &new.c_phi3),
            m_phi: mix(&self.m_phi, &new.m_phi),
            m_psi: mix(&self.m_psi, &new.m_psi),
            m_aa: mix(&self.m_aa, &new.m_aa),
            m_a: mix(&self.m_a, &new.m_a),
            r_phixi: mix(&self.r_phixi, &new.r_phixi),
            r_gchi: mix(&self.r_gchi, &new.r_gchi),
            f: mix(&self.f, &new.f),
            delta: mix(&self.delta, &new.delta),
            q_star: mix_opt(&self.q_star, &new.q_star),
            active_fraction: mix_opt(&self.active_fraction, &new.active_fraction),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.parts().iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// `Δ` at a flat index.
    pub(crate) fn delta_flat(&self, j: usize) -> f64 {
        self.delta[(j % self.p, j / self.p)]
    }

    /// Mean loss at every step.
    pub fn loss_curve(&self, y: &nalgebra::DVector<f64>, loss: &LossKind) -> Vec<f64> {
        (0..=self.steps)
            .map(|n| (0..self.p).map(|mu| loss.value(self.f[(mu, n)], y[mu])).sum::<f64>() / self.p as f64)
            .collect()
    }

    /// One of the two-time objects as a tagged kernel on every step.
    pub fn two_time(&self, name: &str) -> Result<TwoTimeKernel> {
        let mat = match name {
            "C_h" => &self.c_h,
            "C_g" => &self.c_g,
            "C_phi3" => &self.c_phi3,
            "M_phi" => &self.m_phi,
            "M_psi" => &self.m_psi,
            "M_AA" => &self.m_aa,
            "R_phixi" => &self.r_phixi,
            "R_gchi" => &self.r_gchi,
            _ => return Err(Error::config(format!("unknown mean-field kernel `{name}`"))),
        };
        TwoTimeKernel::new(format!("dmft:{name}"), self.p, (0..=self.steps).collect(), mat.clone())
    }
}

/// Names accepted by [`DmftKernels::two_time`].
pub const KERNEL_NAMES: [&str; 8] = ["C_h", "C_g", "C_phi3", "M_phi", "M_psi", "M_AA", "R_phixi", "R_gchi"];

/// Threshold `q★` such that exactly `⌈κM⌉` samples are active, together
/// with the active mask. Ties at the threshold activate lower indices first.
pub fn quantile_threshold(q: &[f64], kappa: f64) -> Result<(f64, Vec<bool>)> {
    if q.is_empty() {
        return Err(Error::config("empty cohort"));
    }
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(Error::config(format!("kappa = {kappa} must lie in (0, 1]")));
    }
    if q.iter().any(|v| v.is_nan()) {
        return Err(Error::Divergence { step: 0, reason: "NaN gate score".into() });
    }
    let count = ((kappa * q.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let idx = top_indices(q, count);
    let mut mask = vec![false; q.len()];
    for &i in &idx {
        mask[i] = true;
    }
    Ok((q[*idx.last().unwrap()], mask))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Max entrywise change of the damped iterate.
    pub change: f64,
    /// Max entrywise distance between the iterate and its Picard image.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmftSolution {
    pub kernels: DmftKernels,
    pub converged: bool,
    pub iterations: usize,
    /// Fixed-point residual of the returned iterate's predecessor.
    pub residual: f64,
    pub log: Vec<IterationRecord>,
}

impl DmftSolution {
    pub fn loss_curve(&self, cfg: &DmftConfig) -> Vec<f64> {
        self.kernels.loss_curve(&cfg.data.y, &cfg.loss)
    }
}

/// One undamped Picard image: every site sampled against `k`.
pub fn picard_map(cfg: &DmftConfig, k: &DmftKernels, iteration: usize) -> Result<DmftKernels> {
    let s = if cfg.frozen_noise { cfg.seed } else { seed::derive(cfg.seed, &format!("iteration/{iteration}")) };
    let res = sample_residual_site(cfg, k, cfg.pops.residual, seed::derive(s, "residual"))?;
    let exp = sample_expert_site(cfg, k, cfg.pops.experts, seed::derive(s, "expert"))?;
    let out = DmftKernels {
        p: k.p,
        steps: k.steps,
        c_h: res.c_h(),
        c_g: res.c_g(),
        c_phi3: res.c_phi3(),
        m_phi: exp.m_phi,
        m_psi: exp.m_psi,
        m_aa: exp.m_aa,
        m_a: exp.m_a,
        r_phixi: exp.r_phixi,
        r_gchi: exp.r_gchi,
        f: res.f,
        delta: res.delta,
        q_star: exp.q_star,
        active_fraction: exp.active_fraction,
    };
    if !out.is_finite() {
        return Err(Error::Divergence { step: iteration, reason: "non-finite mean-field kernels".into() });
    }
    Ok(out)
}

/// Damped Picard iteration from [`DmftKernels::initial`] until the damped
/// update changes no entry by more than `tol`. Without convergence the
/// iterate with the smallest residual is returned, flagged.
pub fn solve_dmft(cfg: &DmftConfig) -> Result<DmftSolution> {
    solve_from(cfg, DmftKernels::initial(cfg))
}

/// [`solve_dmft`] from a given starting point.
pub fn solve_from(cfg: &DmftConfig, start: DmftKernels) -> Result<DmftSolution> {
    cfg.validate()?;
    let mut k = start;
    let mut log = Vec::new();
    let mut best: Option<(f64, DmftKernels)> = None;
    for it in 1..=cfg.max_iter {
        let img = picard_map(cfg, &k, it)?;
        let residual = img.max_change(&k);
        let next = k.damp(&img, cfg.damping);
        let change = next.max_change(&k);
        log.push(IterationRecord { iteration: it, change, residual });
        if change <= cfg.tol {
            return Ok(DmftSolution { kernels: next, converged: true, iterations: it, residual, log });
        }
        if best.as_ref().is_none_or(|(r, _)| residual < *r) {
            best = Some((residual, next.clone()));
        }
        k = next;
    }
    let (residual, kernels) = best.unwrap_or((f64::INFINITY, k));
    Ok(DmftSolution { kernels, converged: false, iterations: cfg.max_iter, residual, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_counts_and_ties() {
        let q = [0.3, 0.9, 0.3, 0.1, 0.3];
        let (t, m) = quantile_threshold(&q, 0.4).unwrap();
        assert_eq!(t, 0.3);
        assert_eq!(m, vec![true, true, false, false, false]);
        let (_, m) = quantile_threshold(&q, 0.5).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 3);
        let (t, m) = quantile_threshold(&q, 1.0).unwrap();
        assert_eq!((t, m.iter().all(|&b| b)), (0.1, true));
        assert!(quantile_threshold(&[], 0.5).is_err());
        assert!(quantile_threshold(&q, 0.0).is_err());
    }

    #[test]
    fn damping_interpolates() {
        let cfg = DmftConfig::new(Dataset::probe_task(3, 2, 0), 2, 0.1, MeanFieldRates::uniform(1.0));
        let a = DmftKernels::initial(&cfg);
        let mut b = a.clone();
        b.c_g.fill(2.0);
        let h = a.damp(&b, 0.25);
        assert!((h.c_g[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((h.max_change(&a) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn validation_rejects_bad_budgets() {
        let mut cfg = DmftConfig::new(Dataset::probe_task(3, 2, 0), 2, 0.1, MeanFieldRates::uniform(1.0));
        cfg.pops = Populations { residual: 8, experts: 8, within: 8, cap: 32 };
        assert!(cfg.validate().is_err());
        cfg.pops.cap = 64;
        assert!(cfg.validate().is_ok());
        cfg.damping = 0.0;
        assert!(cfg.validate().is_err());
    }
}
