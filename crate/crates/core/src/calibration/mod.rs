//! Statistical calibration of the verification test and the bounds around it.
//!
//! Covers the mixing-adjusted Hoeffding threshold (`eps_err`, `tau`), the
//! Bernoulli(1/2) Monte Carlo null, key-collision probability, Clopper-Pearson
//! lower bounds, and the imperceptibility constants (PL fit, `L_s`,
//! `beta_max`). All exponential bounds use the natural logarithm.

pub mod special;

use crate::graph::Graph;
use crate::nn::{Model, NnError, ParamSelector};
use crate::par::Exec;
use crate::rng::{derive_seed, rng_for, SplitMix64};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("calibration infeasible: eps_err = {0} >= 0.5 would accept chance-level matching")]
    Infeasible(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid counts: {successes} successes out of {n}")]
    InvalidCounts { successes: u64, n: u64 },
    #[error("need at least {needed} (grad_norm_sq, loss_gap) pairs, got {got}")]
    InsufficientPairs { needed: usize, got: usize },
    #[error("fitted PL slope is not positive")]
    NonpositiveSlope,
    #[error("all inputs to beta_max must be positive")]
    NonpositiveInput,
    #[error(transparent)]
    Model(#[from] NnError),
}

/// `c_rho = min(4 rho0, 0.5)`.
pub fn mixing_factor(rho0: f64) -> f64 {
    (4.0 * rho0).min(0.5)
}

/// Per-bit error tolerance making the mixing-adjusted Hoeffding bound equal
/// `alpha`: `sqrt(ln(1/alpha) / (2 (1 - c_rho) m))`.
pub fn solve_eps_err(m: usize, alpha: f64, rho0: f64) -> Result<f64, CalibrationError> {
    if m == 0 {
        return Err(CalibrationError::InvalidArgument("m must be positive".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CalibrationError::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if !(rho0 >= 0.0) {
        return Err(CalibrationError::InvalidArgument(format!("rho0 must be nonnegative, got {rho0}")));
    }
    let c = mixing_factor(rho0);
    let mut eps = ((1.0 / alpha).ln() / (2.0 * (1.0 - c) * m as f64)).sqrt();
    // Step up by ulps until the bound is met in floating point too.
    while eps.is_finite() && alpha_bound(m, eps, rho0) > alpha {
        eps = f64::from_bits(eps.to_bits() + 1);
    }
    if eps >= 0.5 {
        return Err(CalibrationError::Infeasible(eps));
    }
    Ok(eps)
}

/// `ceil(m (1 - eps_err))`, computed with a small tolerance so that exact
/// products such as `128 * (1 - 34/128)` are not pushed up by rounding.
pub fn tau_from_eps(m: usize, eps_err: f64) -> usize {
    let x = m as f64 * (1.0 - eps_err);
    let r = x.round();
    let t = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (t.max(0.0) as usize).min(m)
}

/// False-positive bound `exp(-2 (1 - c_rho) m eps^2)`.
pub fn alpha_bound(m: usize, eps_err: f64, rho0: f64) -> f64 {
    (-2.0 * (1.0 - mixing_factor(rho0)) * m as f64 * eps_err * eps_err).exp()
}

/// False-negative bound `exp(-2 (1 - c_rho) m (kappa - gamma)^2)`; 1 when
/// `gamma >= kappa` (no guarantee).
pub fn beta_fn_bound(m: usize, kappa: f64, gamma: f64, rho0: f64) -> f64 {
    if gamma >= kappa {
        return 1.0;
    }
    let d = kappa - gamma;
    (-2.0 * (1.0 - mixing_factor(rho0)) * m as f64 * d * d).exp()
}

/// Calibrated verification configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditThresholds {
    pub m: usize,
    pub alpha: f64,
    pub rho0: f64,
    pub c_rho: f64,
    pub eps_err: f64,
    pub tau: usize,
}

impl AuditThresholds {
    pub fn calibrate(m: usize, alpha: f64, rho0: f64) -> Result<Self, CalibrationError> {
        let eps_err = solve_eps_err(m, alpha, rho0)?;
        Ok(Self { m, alpha, rho0, c_rho: mixing_factor(rho0), eps_err, tau: tau_from_eps(m, eps_err) })
    }

    /// Thresholds with an externally fixed `tau`; `eps_err` is back-filled as
    /// `1 - tau/m` and `alpha` as the corresponding bound.
    pub fn with_tau(m: usize, tau: usize, rho0: f64) -> Self {
        let eps_err = 1.0 - tau as f64 / m.max(1) as f64;
        Self { m, alpha: alpha_bound(m, eps_err, rho0), rho0, c_rho: mixing_factor(rho0), eps_err, tau }
    }
}

/// `P[Binom(m, 1/2) >= tau]`, summed in log space.
pub fn binomial_tail_half(m: usize, tau: usize) -> f64 {
    if tau == 0 {
        return 1.0;
    }
    if tau > m {
        return 0.0;
    }
    let ln_half_m = m as f64 * 0.5f64.ln();
    let mut ln_fact = vec![0.0f64; m + 1];
    for k in 1..=m {
        ln_fact[k] = ln_fact[k - 1] + (k as f64).ln();
    }
    let terms: Vec<f64> = (tau..=m).map(|k| ln_fact[m] - ln_fact[k] - ln_fact[m - k] + ln_half_m).collect();
    let mx = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()).exp().min(1.0)
}

const MC_BLOCK: usize = 4096;

fn null_match_count(m: usize, rng: &mut SplitMix64) -> usize {
    let mut left = m;
    let mut count = 0;
    while left > 0 {
        let take = left.min(64);
        let word = rng.next_u64();
        let word = if take == 64 { word } else { word & ((1u64 << take) - 1) };
        count += word.count_ones() as usize;
        left -= take;
    }
    count
}

/// Fraction of `trials` independent Bernoulli(1/2)^m bit strings whose match
/// count against a fixed key reaches `tau`.
pub fn monte_carlo_null(m: usize, tau: usize, trials: u64, seed: u64) -> f64 {
    monte_carlo_null_with(Exec::default(), m, tau, trials, seed)
}

pub fn monte_carlo_null_with(exec: Exec, m: usize, tau: usize, trials: u64, seed: u64) -> f64 {
    if trials == 0 {
        return 0.0;
    }
    let blocks = (trials as usize).div_ceil(MC_BLOCK);
    let hits = exec.sum_u64(blocks, |b| {
        let start = b * MC_BLOCK;
        let end = ((b + 1) * MC_BLOCK).min(trials as usize);
        (start..end)
            .filter(|&t| {
                let mut rng = SplitMix64::new(derive_seed(seed, &[t as u64]));
                null_match_count(m, &mut rng) >= tau
            })
            .count() as u64
    });
    hits as f64 / trials as f64
}

/// Probability that two independently induced keys coincide:
/// `(1 - 2p(1-p))^m`.
pub fn collision_probability(p: f64, m: usize) -> f64 {
    (1.0 - 2.0 * p * (1.0 - p)).powi(m as i32)
}

/// Empirical collision rate over `pairs` independently sampled key pairs
/// with i.i.d. Bernoulli(p) bits.
pub fn sample_collision_rate(exec: Exec, p: f64, m: usize, pairs: u64, seed: u64) -> f64 {
    if pairs == 0 {
        return 0.0;
    }
    let blocks = (pairs as usize).div_ceil(MC_BLOCK);
    let hits = exec.sum_u64(blocks, |b| {
        let start = b * MC_BLOCK;
        let end = ((b + 1) * MC_BLOCK).min(pairs as usize);
        (start..end)
            .filter(|&t| {
                let mut rng = SplitMix64::new(derive_seed(seed, &[t as u64]));
                (0..m).all(|_| (rng.next_f64() < p) == (rng.next_f64() < p))
            })
            .count() as u64
    });
    hits as f64 / pairs as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CpVariant {
    /// Classical one-sided bound: the `delta`-quantile of `Beta(s, n - s + 1)`.
    #[default]
    Classical,
    /// Uniform-prior variant: the `delta`-quantile of `Beta(1 + s, 1 + n - s)`.
    UniformPrior,
}

/// One-sided lower confidence bound on a binomial proportion at level
/// `1 - delta`.
pub fn clopper_pearson_lower(successes: u64, n: u64, delta: f64, variant: CpVariant) -> Result<f64, CalibrationError> {
    if successes > n || n == 0 {
        return Err(CalibrationError::InvalidCounts { successes, n });
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(CalibrationError::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")));
    }
    let (s, f) = (successes as f64, (n - successes) as f64);
    Ok(match variant {
        CpVariant::Classical if successes == 0 => 0.0,
        CpVariant::Classical => special::beta_quantile(delta, s, f + 1.0),
        CpVariant::UniformPrior => special::beta_quantile(delta, s + 1.0, f + 1.0),
    })
}

/// Lower bound `p_min` on the probability that a protocol-generated carrier
/// decodes to 1, from the normalized targets of a candidate pool.
pub fn estimate_p_min(targets: &[f64], delta: f64, variant: CpVariant) -> Result<f64, CalibrationError> {
    let ones = targets.iter().filter(|&&t| t >= 0.5).count() as u64;
    clopper_pearson_lower(ones, targets.len() as u64, delta, variant)
}

pub const PL_TRIM_FRACTION: f64 = 0.05;
pub const HUBER_DELTA: f64 = 1.0;
pub const BOOTSTRAP_RESAMPLES: usize = 1000;
const HUBER_MAX_ITERS: usize = 100;

/// Result of the PL-constant fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlFit {
    /// Conservative PL constant `1 / (2 s_upper)`.
    pub mu_pl: f64,
    /// Huber slope of `loss_gap` on `grad_norm_sq` on the full trimmed sample.
    pub slope: f64,
    /// 95th percentile of the bootstrap slopes.
    pub slope_upper: f64,
    pub pairs_used: usize,
}

fn huber_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    if sxx <= 0.0 {
        return 0.0;
    }
    let mut s = xs.iter().zip(ys).map(|(x, y)| x * y).sum::<f64>() / sxx;
    for _ in 0..HUBER_MAX_ITERS {
        let (mut num, mut den) = (0.0, 0.0);
        for (x, y) in xs.iter().zip(ys) {
            let r = (y - s * x).abs();
            let w = if r <= HUBER_DELTA { 1.0 } else { HUBER_DELTA / r };
            num += w * x * y;
            den += w * x * x;
        }
        let next = if den > 0.0 { num / den } else { s };
        if (next - s).abs() <= 1e-12 * s.abs().max(1e-300) {
            s = next;
            break;
        }
        s = next;
    }
    s
}

/// Fits the local PL constant from `(grad_norm_sq, loss_gap)` pairs.
///
/// Pairs in the top 5% of `grad_norm_sq` are trimmed; `loss_gap = s *
/// grad_norm_sq` is fit through the origin by Huber IRLS (δ = 1); the slope
/// is bootstrapped ([`BOOTSTRAP_RESAMPLES`] resamples keyed by `seed`), and
/// `mu_pl = 1 / (2 s_upper)` with `s_upper` the 95% upper bound.
pub fn fit_pl_constant(pairs: &[(f64, f64)], seed: u64) -> Result<PlFit, CalibrationError> {
    fit_pl_constant_with(Exec::default(), pairs, seed)
}

pub fn fit_pl_constant_with(exec: Exec, pairs: &[(f64, f64)], seed: u64) -> Result<PlFit, CalibrationError> {
    if pairs.len() < 10 {
        return Err(CalibrationError::InsufficientPairs { needed: 10, got: pairs.len() });
    }
    if pairs.iter().any(|&(x, y)| !(x >= 0.0) || !(y >= 0.0) || !x.is_finite() || !y.is_finite()) {
        return Err(CalibrationError::InvalidArgument("pairs must be finite and nonnegative".into()));
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let keep = ((1.0 - PL_TRIM_FRACTION) * sorted.len() as f64).ceil() as usize;
    sorted.truncate(keep);
    let xs: Vec<f64> = sorted.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = sorted.iter().map(|p| p.1).collect();
    let slope = huber_slope(&xs, &ys);
    if !(slope > 0.0) {
        return Err(CalibrationError::NonpositiveSlope);
    }
    let n = xs.len();
    let mut boot = exec.map(BOOTSTRAP_RESAMPLES, |b| {
        let mut rng = rng_for(seed, &[b as u64]);
        let (mut bx, mut by) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            bx.push(xs[i]);
            by.push(ys[i]);
        }
        huber_slope(&bx, &by)
    });
    boot.sort_by(f64::total_cmp);
    let slope_upper = crate::graph::percentile(&boot, 95.0);
    if !(slope_upper > 0.0) {
        return Err(CalibrationError::NonpositiveSlope);
    }
    Ok(PlFit { mu_pl: 1.0 / (2.0 * slope_upper), slope, slope_upper, pairs_used: n })
}

/// PL pairs from a loss trajectory: `loss_gap = loss - min(loss)`.
pub fn pl_pairs_from_trajectory(grad_norm_sq: &[f64], losses: &[f64]) -> Vec<(f64, f64)> {
    let floor = losses.iter().copied().fold(f64::INFINITY, f64::min);
    grad_norm_sq.iter().zip(losses).map(|(&g, &l)| (g, (l - floor).max(0.0))).collect()
}

pub const DEFAULT_EPS_L: f64 = 0.12;

/// `(1 + eps_l) * max_G ||∇_θ s_θ(G)||₂` over all parameters, perception
/// head included.
pub fn estimate_ls(model: &Model, graphs: &[Graph], eps_l: f64) -> Result<f64, CalibrationError> {
    estimate_ls_with(Exec::default(), model, graphs, eps_l)
}

pub fn estimate_ls_with(exec: Exec, model: &Model, graphs: &[Graph], eps_l: f64) -> Result<f64, CalibrationError> {
    if graphs.is_empty() {
        return Err(CalibrationError::InvalidArgument("estimate_ls needs at least one graph".into()));
    }
    let norms = exec.map_slice(graphs, |g| model.score_with_grad(g).map(|(_, grads)| grads.norm(ParamSelector::All)));
    let mut raw = 0.0f64;
    for n in norms {
        raw = raw.max(n?);
    }
    Ok((1.0 + eps_l) * raw)
}

/// `beta_max = sqrt(2 mu_pl eps_task) / L_s`.
pub fn beta_max(mu_pl: f64, eps_task: f64, l_s: f64) -> Result<f64, CalibrationError> {
    if !(mu_pl > 0.0 && eps_task > 0.0 && l_s > 0.0) {
        return Err(CalibrationError::NonpositiveInput);
    }
    Ok((2.0 * mu_pl * eps_task).sqrt() / l_s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImperceptConstants {
    pub mu_pl: f64,
    pub l_s: f64,
    pub eps_task: f64,
    pub beta_max: f64,
}

impl ImperceptConstants {
    pub fn new(mu_pl: f64, l_s: f64, eps_task: f64) -> Result<Self, CalibrationError> {
        Ok(Self { mu_pl, l_s, eps_task, beta_max: beta_max(mu_pl, eps_task, l_s)? })
    }

    pub fn admits(&self, beta_wm: f64) -> bool {
        beta_wm <= self.beta_max
    }
}

/// Composite drift budget `L_s Δθ + c_prune sqrt(p_pr) + c_distill π_kd`.
pub fn budget_rhs(l_s: f64, delta_theta: f64, c_prune: f64, p_pr: f64, c_distill: f64, pi_kd: f64) -> f64 {
    l_s * delta_theta + c_prune * p_pr.max(0.0).sqrt() + c_distill * pi_kd
}

/// Threshold values printed in the reference worked example; kept only for
/// side-by-side comparison in calibration reports.
pub mod reference {
    pub const M: usize = 128;
    pub const ALPHA: f64 = 1e-6;
    pub const RHO0: f64 = 7.6e-4;
    pub const EPS_ERR: f64 = 0.2656;
    pub const TAU: usize = 94;
}

/// Side-by-side comparison of computed thresholds with the reference
/// worked-example values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceComparison {
    pub reference_eps_err: f64,
    pub reference_tau: usize,
    pub computed_eps_err: f64,
    pub computed_tau: usize,
    pub eps_err_delta: f64,
    pub tau_delta: i64,
    pub discrepancy: bool,
    pub note: String,
}

/// Calibration report: inputs, computed thresholds and bounds, and the
/// optional reference comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub thresholds: AuditThresholds,
    pub alpha_bound: f64,
    pub exact_null_tail: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceComparison>,
}

impl CalibrationReport {
    pub fn new(m: usize, alpha: f64, rho0: f64, compare_reference: bool) -> Result<Self, CalibrationError> {
        let thresholds = AuditThresholds::calibrate(m, alpha, rho0)?;
        let reference = if compare_reference {
            let at_ref = AuditThresholds::calibrate(reference::M, reference::ALPHA, reference::RHO0)?;
            let discrepancy = at_ref.tau != reference::TAU || (at_ref.eps_err - reference::EPS_ERR).abs() > 5e-5;
            Some(ReferenceComparison {
                reference_eps_err: reference::EPS_ERR,
                reference_tau: reference::TAU,
                computed_eps_err: at_ref.eps_err,
                computed_tau: at_ref.tau,
                eps_err_delta: at_ref.eps_err - reference::EPS_ERR,
                tau_delta: at_ref.tau as i64 - reference::TAU as i64,
                discrepancy,
                note: if discrepancy {
                    format!(
                        "closed form at m={}, alpha={:e}, rho0={:e} gives eps_err={:.5}, tau={}; reference example states eps_err={}, tau={}",
                        reference::M,
                        reference::ALPHA,
                        reference::RHO0,
                        at_ref.eps_err,
                        at_ref.tau,
                        reference::EPS_ERR,
                        reference::TAU
                    )
                } else {
                    "computed thresholds agree with the reference example".into()
                },
            })
        } else {
            None
        };
        Ok(Self {
            alpha_bound: alpha_bound(m, thresholds.eps_err, rho0),
            exact_null_tail: binomial_tail_half(m, thresholds.tau),
            thresholds,
            reference,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eps_err_closed_form() {
        // ln(1e6) / 256 evaluated independently.
        let want = (6.0 * 10f64.ln() / 256.0).sqrt();
        assert!((solve_eps_err(128, 1e-6, 0.0).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.232_31).abs() < 1e-5);
        let with_rho = solve_eps_err(128, 1e-6, 7.6e-4).unwrap();
        assert!((with_rho - 0.232_662).abs() < 1e-5, "{with_rho}");
    }

    #[test]
    fn infeasible_when_m_small() {
        assert!(matches!(solve_eps_err(4, 1e-6, 0.0), Err(CalibrationError::Infeasible(_))));
        assert!(solve_eps_err(128, 0.0, 0.0).is_err());
        assert!(solve_eps_err(0, 0.1, 0.0).is_err());
    }

    #[test]
    fn tau_examples() {
        assert_eq!(tau_from_eps(128, 34.0 / 128.0), 94);
        assert_eq!(tau_from_eps(128, 0.2656), 95);
        assert_eq!(tau_from_eps(128, 0.23268), 99);
        assert_eq!(tau_from_eps(128, 1e-12), 128);
    }

    #[test]
    fn bounds() {
        assert_eq!(alpha_bound(77, 0.0, 0.3), 1.0);
        assert!((alpha_bound(128, 0.25, 0.0) - (-16f64).exp()).abs() < 1e-20);
        assert_eq!(beta_fn_bound(128, 0.2, 0.2, 0.0), 1.0);
        assert_eq!(beta_fn_bound(128, 0.2, 0.3, 0.0), 1.0);
        assert!(beta_fn_bound(128, 0.38, 0.1, 0.0) < 1e-8);
    }

    #[test]
    fn mixing_factor_caps() {
        assert_eq!(mixing_factor(0.0), 0.0);
        assert!((mixing_factor(7.6e-4) - 3.04e-3).abs() < 1e-15);
        assert_eq!(mixing_factor(0.3), 0.5);
    }

    #[test]
    fn mc_null_edges() {
        assert_eq!(monte_carlo_null(16, 0, 1000, 1), 1.0);
        assert_eq!(monte_carlo_null(16, 17, 1000, 1), 0.0);
        assert_eq!(monte_carlo_null(16, 9, 0, 1), 0.0);
        assert_eq!(
            monte_carlo_null_with(Exec::Sequential, 70, 36, 20_000, 5),
            monte_carlo_null_with(Exec::Parallel, 70, 36, 20_000, 5)
        );
    }

    #[test]
    fn binomial_tail_small_cases() {
        assert!((binomial_tail_half(4, 4) * 16.0 - 1.0).abs() < 1e-13, "{}", binomial_tail_half(4, 4));
        assert!((binomial_tail_half(4, 3) * 16.0 - 5.0).abs() < 1e-13);
        assert_eq!(binomial_tail_half(4, 0), 1.0);
        assert_eq!(binomial_tail_half(4, 5), 0.0);
    }

    #[test]
    fn collision_formula() {
        assert!((collision_probability(0.5, 8) - 0.003_906_25).abs() < 1e-15);
        assert_eq!(collision_probability(0.0, 8), 1.0);
        assert_eq!(collision_probability(1.0, 8), 1.0);
    }

    #[test]
    fn clopper_pearson_cases() {
        assert_eq!(clopper_pearson_lower(0, 10, 0.05, CpVariant::Classical).unwrap(), 0.0);
        let all = clopper_pearson_lower(20, 20, 0.05, CpVariant::Classical).unwrap();
        assert!((all - 0.05f64.powf(0.05)).abs() < 1e-10);
        assert!((all - 0.8609).abs() < 1e-4);
        assert!(clopper_pearson_lower(11, 10, 0.05, CpVariant::Classical).is_err());
        assert!(clopper_pearson_lower(1, 10, 1.5, CpVariant::Classical).is_err());
        // Uniform-prior variant with zero successes is Beta(1, n+1): 1 - (1-δ)^(1/(n+1)).
        let u = clopper_pearson_lower(0, 9, 0.05, CpVariant::UniformPrior).unwrap();
        assert!((u - (1.0 - 0.95f64.powf(0.1))).abs() < 1e-10);
    }

    #[test]
    fn pl_fit_errors() {
        let short = vec![(1.0, 1.0); 5];
        assert!(matches!(fit_pl_constant(&short, 0), Err(CalibrationError::InsufficientPairs { .. })));
        let flat: Vec<_> = (1..30).map(|i| (i as f64, 0.0)).collect();
        assert_eq!(fit_pl_constant(&flat, 0), Err(CalibrationError::NonpositiveSlope));
    }

    #[test]
    fn pl_fit_exact_quadratic() {
        // Exact PL equality: gap = g / (2 mu).
        let mu = 0.85;
        let pairs: Vec<_> = (1..200).map(|i| {
            let g = i as f64 * 0.01;
            (g, g / (2.0 * mu))
        }).collect();
        let fit = fit_pl_constant(&pairs, 3).unwrap();
        assert!((fit.mu_pl - mu).abs() < 1e-9, "{fit:?}");
    }

    #[test]
    fn beta_max_values() {
        let b = beta_max(0.85, 0.012, 1.12e3).unwrap();
        assert!((b - 1.275_255e-4).abs() < 1e-9);
        assert!(9.5e-5 <= b);
        let b2 = beta_max(0.85, 0.024, 1.12e3).unwrap();
        assert!((b2 / b - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(beta_max(0.0, 1.0, 1.0), Err(CalibrationError::NonpositiveInput));
    }

    #[test]
    fn budget_arithmetic() {
        assert_eq!(budget_rhs(0.0, 0.0, 0.0, 0.0, 0.0, 0.0), 0.0);
        assert!((budget_rhs(0.0, 0.0, 0.382, 0.5, 0.0, 0.0) - 0.2701).abs() < 1e-4);
    }

    #[test]
    fn report_flags_reference_discrepancy() {
        let r = CalibrationReport::new(128, 1e-6, 7.6e-4, true).unwrap();
        let c = r.reference.unwrap();
        assert!(c.discrepancy);
        assert_eq!(c.computed_tau, 99);
        assert_eq!(c.reference_tau, 94);
        assert!(r.alpha_bound <= 1e-6 * (1.0 + 1e-9));
    }
}
