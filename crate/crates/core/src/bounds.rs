//! Analytic tail-bound evaluation and Monte Carlo verification.
//!
//! The right-hand sides of the two probabilistic guarantees are evaluated
//! in closed form; the left-hand-side event probability is estimated by
//! repeated simulation over a model-change ensemble. The event indicator is
//! coded exactly as the guarantee states it, not in any rearranged form, so
//! the verification cannot drift from the statement.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::modelchange::ModelChangeEnsemble;
use crate::models::{l2_distance, FeatureVector};
use crate::rng::{derive_seed, rng_from_seed};
use crate::stability::StabilityConfig;
use crate::stats::{wilson_interval, Z_99};
use crate::training::LogisticLoss;

/// `exp(-k eps^2 / (8 (gamma + gamma_m)^2 sigma2))`, the tail bound for
/// mean-preserving model change with Gaussian local sampling.
pub fn rhs_theorem1(k: usize, epsilon: f64, gamma: f64, gamma_m: f64, sigma2: f64) -> f64 {
    (-(k as f64) * epsilon * epsilon / (8.0 * (gamma + gamma_m).powi(2) * sigma2)).exp()
}

/// `2 exp(-eps^2 k / 2) + exp(-ell^2 / 2)`, the tail bound for
/// distance-bounded model change. May exceed 1, in which case it is vacuous.
pub fn rhs_theorem2(k: usize, epsilon: f64, ell: f64) -> f64 {
    2.0 * (-epsilon * epsilon * k as f64 / 2.0).exp() + (-ell * ell / 2.0).exp()
}

/// `(2 L^2 / xi) * sum of eta_t over the differing steps`: the bound on the
/// expected L2 model distance induced by a perturbed retraining.
pub fn theorem3_bound_delta(loss: &LogisticLoss, step_sizes: &[f64], differing: &[usize]) -> f64 {
    let l = loss.lipschitz();
    let xi = loss.admissibility();
    let sum: f64 = differing.iter().map(|&t| step_sizes[t]).sum();
    2.0 * l * l / xi * sum
}

/// A bound-verification query; carries every parameter of the event and of
/// the analytic right-hand side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundQuery {
    Theorem1 {
        epsilon: f64,
        gamma: f64,
        gamma_m: f64,
        sigma2: f64,
    },
    Theorem2 {
        epsilon: f64,
        ell: f64,
        delta: f64,
        nu: f64,
        kappa: f64,
        gamma: f64,
    },
}

impl BoundQuery {
    pub fn rhs(&self, k: usize) -> f64 {
        match *self {
            BoundQuery::Theorem1 { epsilon, gamma, gamma_m, sigma2 } => {
                rhs_theorem1(k, epsilon, gamma, gamma_m, sigma2)
            }
            BoundQuery::Theorem2 { epsilon, ell, .. } => rhs_theorem2(k, epsilon, ell),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            BoundQuery::Theorem1 { epsilon, gamma, gamma_m, sigma2 } => {
                epsilon > 0.0 && gamma >= 0.0 && gamma_m >= 0.0 && gamma + gamma_m > 0.0 && sigma2 > 0.0
            }
            BoundQuery::Theorem2 { epsilon, ell, delta, nu, kappa, gamma } => {
                epsilon > 0.0
                    && ell > 0.0
                    && delta >= 0.0
                    && nu >= 0.0
                    && kappa.is_finite()
                    && kappa >= 0.0
                    && gamma >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("bound query parameters out of range"))
        }
    }
}

/// Outcome of one Monte Carlo verification run.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct VerificationReport {
    /// Empirical probability of the event.
    pub frequency: f64,
    /// 99% Wilson interval around the frequency.
    pub ci_lower: f64,
    pub ci_upper: f64,
    /// Analytic right-hand side.
    pub analytic_bound: f64,
    /// True when the CI lower bound exceeds the analytic bound; Monte Carlo
    /// noise alone cannot set this.
    pub violated: bool,
    /// True when the analytic bound is >= 1 and certifies nothing.
    pub vacuous: bool,
    pub trials: usize,
}

/// Estimate the probability of the guarantee's event over the randomness of
/// the changed model and of the local samples.
///
/// Each trial draws one member uniformly from the ensemble and a fresh set
/// of `cfg.k` samples around `x`, then evaluates the event indicator as
/// written. Trials derive their RNG streams from `(seed, trial)`, so the
/// result is independent of scheduling.
pub fn lhs_event_frequency(
    ens: &ModelChangeEnsemble,
    x: &FeatureVector,
    cfg: &StabilityConfig,
    query: &BoundQuery,
    trials: usize,
    seed: u64,
) -> Result<VerificationReport> {
    query.validate()?;
    if trials == 0 {
        return Err(Error::invalid("verification needs at least one trial"));
    }
    let sampling = cfg.sampling_distribution(x)?;
    let member_count = ens.members.len();
    let indicators: Vec<Result<bool>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let trial_seed = derive_seed(seed, "trial", trial as u64);
            let mut rng = rng_from_seed(trial_seed);
            let member = &ens.members[rng.gen_range(0..member_count)];
            let samples = sampling.sample(cfg.k, derive_seed(trial_seed, "samples", 0));
            let k = cfg.k as f64;
            let mut mean_m = 0.0;
            let mut mean_dist = 0.0;
            for xi in &samples {
                mean_m += ens.original.predict(xi)?;
                mean_dist += l2_distance(x, xi);
            }
            mean_m /= k;
            mean_dist /= k;
            let m_at_x = member.predict(x)?;
            let event = match *query {
                BoundQuery::Theorem1 { epsilon, gamma, .. } => {
                    mean_m - m_at_x >= gamma * mean_dist + epsilon
                }
                BoundQuery::Theorem2 { epsilon, ell, delta, nu, kappa, gamma } => {
                    mean_m - m_at_x >= gamma * mean_dist + epsilon + (delta + ell * nu) * kappa
                }
            };
            Ok(event)
        })
        .collect();
    let mut successes = 0usize;
    for i in indicators {
        if i? {
            successes += 1;
        }
    }
    let frequency = successes as f64 / trials as f64;
    let (ci_lower, ci_upper) = wilson_interval(successes, trials, Z_99);
    let analytic_bound = query.rhs(cfg.k);
    Ok(VerificationReport {
        frequency,
        ci_lower,
        ci_upper,
        analytic_bound,
        violated: ci_lower > analytic_bound,
        vacuous: analytic_bound >= 1.0,
        trials,
    })
}
