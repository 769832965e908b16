//! The stability measure of a counterfactual, its computable relaxation,
//! the robustness test, and the mean output deviation between two models
//! on a sample set.
//!
//! `R` averages `m(x_i) - gamma * ||x - x_i||` over k local samples and
//! needs a uniform Lipschitz bound `gamma`; the relaxation `Rhat` replaces
//! the distance penalty with the observed output difference and is always
//! computable. Both are evaluated on the same seeded sample stream so the
//! dominance `Rhat >= R` is exact rather than statistical.

use crate::distributions::Distribution;
use crate::error::{Error, Result};
use crate::models::{l2_distance, FeatureVector, Model};
use serde::Serialize;

/// How local samples around a counterfactual are drawn.
#[derive(Debug, Clone)]
pub enum SamplingSpec {
    /// Isotropic Gaussian centered at the query point (the default).
    GaussianLocal { sigma2: f64 },
    /// Any analytic distribution; enables non-Gaussian local sampling.
    Custom(Distribution),
}

/// Configuration for stability evaluation at one point.
#[derive(Debug, Clone)]
pub struct StabilityConfig {
    pub k: usize,
    pub sampling: SamplingSpec,
    pub tau: f64,
    pub seed: u64,
}

impl StabilityConfig {
    pub fn new(k: usize, sampling: SamplingSpec, tau: f64, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("stability needs k >= 1"));
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::config("tau must lie in [0,1]"));
        }
        if let SamplingSpec::GaussianLocal { sigma2 } = sampling {
            if !(sigma2.is_finite() && sigma2 > 0.0) {
                return Err(Error::config("sigma2 must be positive"));
            }
        }
        Ok(StabilityConfig { k, sampling, tau, seed })
    }

    pub fn gaussian(k: usize, sigma2: f64, tau: f64, seed: u64) -> Result<Self> {
        StabilityConfig::new(k, SamplingSpec::GaussianLocal { sigma2 }, tau, seed)
    }

    /// The sampling distribution for a query at `x`.
    pub fn sampling_distribution(&self, x: &FeatureVector) -> Result<Distribution> {
        match &self.sampling {
            SamplingSpec::GaussianLocal { sigma2 } => {
                Distribution::gaussian(x.coords().to_vec(), *sigma2)
            }
            SamplingSpec::Custom(d) => {
                if d.dim() != x.dim() {
                    return Err(Error::DimensionMismatch { expected: x.dim(), got: d.dim() });
                }
                Ok(d.clone())
            }
        }
    }

    /// Draw the k local samples for a query at `x`.
    pub fn draw_samples(&self, x: &FeatureVector) -> Result<Vec<FeatureVector>> {
        Ok(self.sampling_distribution(x)?.sample(self.k, self.seed))
    }
}

/// `R = (1/k) sum of (m(x_i) - gamma * ||x - x_i||)` on explicit samples.
pub fn stability_r_on(
    model: &Model,
    gamma: f64,
    x: &FeatureVector,
    samples: &[FeatureVector],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("stability needs at least one sample"));
    }
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::invalid("gamma must be a non-negative real"));
    }
    let mut acc = 0.0;
    for xi in samples {
        acc += model.predict(xi)? - gamma * l2_distance(x, xi);
    }
    Ok(acc / samples.len() as f64)
}

/// `R` on samples drawn per the config.
pub fn stability_r(model: &Model, gamma: f64, x: &FeatureVector, cfg: &StabilityConfig) -> Result<f64> {
    stability_r_on(model, gamma, x, &cfg.draw_samples(x)?)
}

/// `Rhat = (1/k) sum of (m(x_i) - |m(x) - m(x_i)|)` on explicit samples.
pub fn stability_rhat_on(model: &Model, x: &FeatureVector, samples: &[FeatureVector]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("stability needs at least one sample"));
    }
    let mx = model.predict(x)?;
    let mut acc = 0.0;
    for xi in samples {
        let mi = model.predict(xi)?;
        acc += mi - (mx - mi).abs();
    }
    Ok(acc / samples.len() as f64)
}

/// `Rhat` on samples drawn per the config.
pub fn stability_rhat(model: &Model, x: &FeatureVector, cfg: &StabilityConfig) -> Result<f64> {
    stability_rhat_on(model, x, &cfg.draw_samples(x)?)
}

/// Outcome of the robustness test `Rhat >= tau`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RobustnessOutcome {
    pub pass: bool,
    pub rhat: f64,
}

/// Accept the counterfactual at `x` iff `Rhat >= tau`.
pub fn robustness_test(model: &Model, x: &FeatureVector, cfg: &StabilityConfig) -> Result<RobustnessOutcome> {
    let rhat = stability_rhat(model, x, cfg)?;
    Ok(RobustnessOutcome { pass: rhat >= cfg.tau, rhat })
}

/// Mean output deviation `(1/k) sum of (m(X_i) - M(X_i))`; lies in [-1, 1].
pub fn psi_statistic(m: &Model, changed: &Model, samples: &[FeatureVector]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("psi statistic needs at least one sample"));
    }
    let mut acc = 0.0;
    for x in samples {
        acc += m.predict(x)? - changed.predict(x)?;
    }
    Ok(acc / samples.len() as f64)
}

/// Everything measured for one counterfactual, ready for export.
#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub x: Vec<f64>,
    pub k: usize,
    pub sigma2: Option<f64>,
    /// Present only when an ensemble supplied `gamma`.
    pub r: Option<f64>,
    pub rhat: f64,
    pub tau: f64,
    pub pass: bool,
    pub seed: u64,
}

/// Evaluate one query: `Rhat` always, `R` when `gamma` is available, both
/// on the same sample stream.
pub fn evaluate(
    model: &Model,
    x: &FeatureVector,
    cfg: &StabilityConfig,
    gamma: Option<f64>,
) -> Result<StabilityReport> {
    let samples = cfg.draw_samples(x)?;
    let rhat = stability_rhat_on(model, x, &samples)?;
    let r = match gamma {
        Some(g) => Some(stability_r_on(model, g, x, &samples)?),
        None => None,
    };
    Ok(StabilityReport {
        x: x.coords().to_vec(),
        k: cfg.k,
        sigma2: match cfg.sampling {
            SamplingSpec::GaussianLocal { sigma2 } => Some(sigma2),
            SamplingSpec::Custom(_) => None,
        },
        r,
        rhat,
        tau: cfg.tau,
        pass: rhat >= cfg.tau,
        seed: cfg.seed,
    })
}
