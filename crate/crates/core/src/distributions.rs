//! Analytic-density distributions over feature space, sampling, the
//! density-ratio norm kappa, and the L2 distance between models under a
//! reference distribution.
//!
//! Only distributions with closed-form densities are supported: the
//! density-ratio norm cannot be computed from empirical samples alone.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::models::{FeatureVector, Model};
use crate::rng::rng_from_seed;
use crate::stats::{mean_and_stderr, McEstimate};
use crate::training::LabeledExample;

const LN_2PI: f64 = 1.8378770664093453;

/// Covariance of a Gaussian component: isotropic `s2 * I` or diagonal.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Isotropic(f64),
    Diagonal(Vec<f64>),
}

/// A single Gaussian over `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    mean: Vec<f64>,
    cov: Covariance,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, cov: Covariance) -> Result<Self> {
        if mean.is_empty() || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::config("gaussian: mean must be finite with dim >= 1"));
        }
        match &cov {
            Covariance::Isotropic(s2) => {
                if !(s2.is_finite() && *s2 > 0.0) {
                    return Err(Error::config("gaussian: sigma2 must be positive"));
                }
            }
            Covariance::Diagonal(d) => {
                if d.len() != mean.len() {
                    return Err(Error::config("gaussian: diagonal length must match dim"));
                }
                if d.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(Error::config("gaussian: variances must be positive"));
                }
            }
        }
        Ok(Gaussian { mean, cov })
    }

    pub fn isotropic(mean: Vec<f64>, sigma2: f64) -> Result<Self> {
        Gaussian::new(mean, Covariance::Isotropic(sigma2))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    fn variance(&self, axis: usize) -> f64 {
        match &self.cov {
            Covariance::Isotropic(s2) => *s2,
            Covariance::Diagonal(d) => d[axis],
        }
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (a, (xa, ma)) in x.iter().zip(&self.mean).enumerate() {
            let v = self.variance(a);
            let z = xa - ma;
            acc += -0.5 * (LN_2PI + v.ln()) - 0.5 * z * z / v;
        }
        acc
    }

    fn sample_into<R: Rng>(&self, rng: &mut R, out: &mut Vec<f64>) {
        for a in 0..self.dim() {
            let z: f64 = rng.sample(StandardNormal);
            out.push(self.mean[a] + self.variance(a).sqrt() * z);
        }
    }
}

/// An analytic-density distribution over `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub enum Distribution {
    Gaussian(Gaussian),
    /// Mixture of Gaussians; weights are positive and sum to one.
    Mixture {
        weights: Vec<f64>,
        components: Vec<Gaussian>,
    },
    /// Uniform over an axis-aligned box.
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
}

impl Distribution {
    pub fn gaussian(mean: Vec<f64>, sigma2: f64) -> Result<Self> {
        Ok(Distribution::Gaussian(Gaussian::isotropic(mean, sigma2)?))
    }

    pub fn gaussian_diagonal(mean: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        Ok(Distribution::Gaussian(Gaussian::new(
            mean,
            Covariance::Diagonal(variances),
        )?))
    }

    pub fn mixture(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::config("mixture: weights and components must match and be non-empty"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::config("mixture: weights must be positive"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("mixture: weights must sum to 1"));
        }
        let dim = components[0].dim();
        if components.iter().any(|c| c.dim() != dim) {
            return Err(Error::config("mixture: components must share a dimension"));
        }
        // store exactly normalized weights
        let weights = weights.iter().map(|w| w / sum).collect();
        Ok(Distribution::Mixture { weights, components })
    }

    pub fn uniform_box(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::config("uniform box: bounds must match and be non-empty"));
        }
        for a in 0..lo.len() {
            if !(lo[a].is_finite() && hi[a].is_finite() && lo[a] < hi[a]) {
                return Err(Error::config("uniform box: need finite lo < hi per axis"));
            }
        }
        Ok(Distribution::UniformBox { lo, hi })
    }

    pub fn dim(&self) -> usize {
        match self {
            Distribution::Gaussian(g) => g.dim(),
            Distribution::Mixture { components, .. } => components[0].dim(),
            Distribution::UniformBox { lo, .. } => lo.len(),
        }
    }

    fn check_dim(&self, x: &FeatureVector) -> Result<()> {
        if x.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.dim(),
            });
        }
        Ok(())
    }

    /// `n` i.i.d. draws; identical seeds give bit-identical output.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<FeatureVector> {
        let mut rng = rng_from_seed(seed);
        let mut out = Vec::with_capacity(n);
        let d = self.dim();
        for _ in 0..n {
            let mut coords = Vec::with_capacity(d);
            match self {
                Distribution::Gaussian(g) => g.sample_into(&mut rng, &mut coords),
                Distribution::Mixture { weights, components } => {
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut chosen = components.len() - 1;
                    for (i, w) in weights.iter().enumerate() {
                        acc += w;
                        if u < acc {
                            chosen = i;
                            break;
                        }
                    }
                    components[chosen].sample_into(&mut rng, &mut coords);
                }
                Distribution::UniformBox { lo, hi } => {
                    for a in 0..d {
                        let u: f64 = rng.gen();
                        coords.push(lo[a] + (hi[a] - lo[a]) * u);
                    }
                }
            }
            out.push(FeatureVector::new(coords).expect("sampled coordinates are finite"));
        }
        out
    }

    /// Closed-form density at `x`; zero outside the support.
    pub fn density(&self, x: &FeatureVector) -> Result<f64> {
        self.check_dim(x)?;
        Ok(match self.log_density_inner(x.coords()) {
            Some(ld) => ld.exp(),
            None => 0.0,
        })
    }

    /// Log density, `None` outside the support.
    pub fn log_density(&self, x: &FeatureVector) -> Result<Option<f64>> {
        self.check_dim(x)?;
        Ok(self.log_density_inner(x.coords()))
    }

    fn log_density_inner(&self, x: &[f64]) -> Option<f64> {
        match self {
            Distribution::Gaussian(g) => Some(g.log_density(x)),
            Distribution::Mixture { weights, components } => {
                // logsumexp over components
                let logs: Vec<f64> = weights
                    .iter()
                    .zip(components)
                    .map(|(w, c)| w.ln() + c.log_density(x))
                    .collect();
                let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                Some(m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln())
            }
            Distribution::UniformBox { lo, hi } => {
                let inside = x.iter().zip(lo.iter().zip(hi)).all(|(c, (l, h))| l <= c && c <= h);
                if inside {
                    let vol: f64 = lo.iter().zip(hi).map(|(l, h)| h - l).product();
                    Some(-vol.ln())
                } else {
                    None
                }
            }
        }
    }

    fn has_full_support(&self) -> bool {
        !matches!(self, Distribution::UniformBox { .. })
    }

    /// Support containment check used to validate absolute continuity.
    fn support_contained_in(&self, other: &Distribution) -> bool {
        if other.has_full_support() {
            return true;
        }
        match (self, other) {
            (
                Distribution::UniformBox { lo, hi },
                Distribution::UniformBox { lo: olo, hi: ohi },
            ) => lo
                .iter()
                .zip(hi)
                .zip(olo.iter().zip(ohi))
                .all(|((l, h), (ol, oh))| ol <= l && h <= oh),
            // self has full support but other does not
            _ => false,
        }
    }
}

/// Result of a kappa estimation.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct KappaEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
    /// False when the chi-square integral is known or suspected to diverge;
    /// the raw estimate is then meaningless and the bound using it vacuous.
    pub reliable: bool,
}

/// Whether the integral behind `kappa^2` is known to converge for this pair.
/// `None` when no analytic criterion applies.
fn chi2_integrable(mu_tilde: &Distribution, mu: &Distribution) -> Option<bool> {
    fn gaussian_pair_ok(t: &Gaussian, m: &Gaussian) -> bool {
        // The integrand p~^2/p is Gaussian-shaped iff 2/var_tilde - 1/var > 0
        // per axis.
        (0..t.dim()).all(|a| t.variance(a) < 2.0 * m.variance(a))
    }
    match (mu_tilde, mu) {
        (Distribution::Gaussian(t), Distribution::Gaussian(m)) => Some(gaussian_pair_ok(t, m)),
        (Distribution::Mixture { components, .. }, Distribution::Gaussian(m)) => {
            Some(components.iter().all(|t| gaussian_pair_ok(t, m)))
        }
        (Distribution::Gaussian(t), Distribution::Mixture { components, .. }) => {
            // sufficient: integrable against any single component
            if components.iter().any(|m| gaussian_pair_ok(t, m)) {
                Some(true)
            } else {
                None
            }
        }
        // bounded density ratio on a bounded support
        (Distribution::UniformBox { .. }, _) => Some(true),
        _ => None,
    }
}

/// Density-ratio norm `kappa(mu~, mu) = || d mu~ / d mu ||_{L2(mu)}`,
/// estimated by Monte Carlo using the identity
/// `integral (d mu~/d mu)^2 d mu = E_{X ~ mu~}[ p~(X) / p(X) ]`.
///
/// Sampling from `mu~` keeps the integrand a plain density ratio, which has
/// lower variance when `mu~` is concentrated relative to `mu`.
pub fn kappa(
    mu_tilde: &Distribution,
    mu: &Distribution,
    n_mc: usize,
    seed: u64,
) -> Result<KappaEstimate> {
    if mu_tilde.dim() != mu.dim() {
        return Err(Error::DimensionMismatch {
            expected: mu.dim(),
            got: mu_tilde.dim(),
        });
    }
    if n_mc == 0 {
        return Err(Error::invalid("kappa needs n_mc >= 1"));
    }
    if !mu_tilde.support_contained_in(mu) {
        return Err(Error::AbsoluteContinuity(
            "support of mu~ is not contained in the support of mu".into(),
        ));
    }
    let points = mu_tilde.sample(n_mc, seed);
    let mut ratios = Vec::with_capacity(n_mc);
    let mut max_ratio: f64 = 0.0;
    for x in &points {
        let lt = mu_tilde
            .log_density(x)?
            .ok_or_else(|| Error::Internal("mu~ sample outside its own support".into()))?;
        let lm = mu.log_density(x)?.ok_or_else(|| {
            Error::AbsoluteContinuity("sampled point falls outside the support of mu".into())
        })?;
        let r = (lt - lm).exp();
        max_ratio = max_ratio.max(r);
        ratios.push(r);
    }
    let (mean, se) = mean_and_stderr(&ratios);
    let value = mean.sqrt();
    // delta method for sqrt
    let stderr = if mean > 0.0 { se / (2.0 * value) } else { 0.0 };
    let analytic_ok = chi2_integrable(mu_tilde, mu).unwrap_or(true);
    // A single sample dominating the sum is the empirical signature of a
    // non-integrable ratio.
    let sum: f64 = ratios.iter().sum();
    let dominated = n_mc >= 1000 && max_ratio > 0.5 * sum;
    Ok(KappaEstimate {
        value,
        stderr,
        n: n_mc,
        reliable: analytic_ok && !dominated,
    })
}

/// `|| m - M ||_{L2(mu)}` estimated over `n_mc` draws from `mu`.
pub fn l2_model_distance(
    m: &Model,
    changed: &Model,
    mu: &Distribution,
    n_mc: usize,
    seed: u64,
) -> Result<McEstimate> {
    if m.dim() != changed.dim() {
        return Err(Error::DimensionMismatch {
            expected: m.dim(),
            got: changed.dim(),
        });
    }
    if n_mc == 0 {
        return Err(Error::invalid("l2_model_distance needs n_mc >= 1"));
    }
    let points = mu.sample(n_mc, seed);
    let mut sq = Vec::with_capacity(n_mc);
    for x in &points {
        let d = m.predict(x)? - changed.predict(x)?;
        sq.push(d * d);
    }
    let (mean, se) = mean_and_stderr(&sq);
    let value = mean.sqrt();
    let stderr = if mean > 0.0 { se / (2.0 * value) } else { 0.0 };
    Ok(McEstimate { value, stderr, n: n_mc })
}

/// Default Monte Carlo sample count for kappa and the L2 model distance.
pub const DEFAULT_N_MC: usize = 100_000;

/// A marginal plus a ground-truth labeler producing labels in `{-1,+1}`.
#[derive(Debug, Clone)]
pub struct LabeledDistribution {
    pub marginal: Distribution,
    pub labeler: Model,
}

impl LabeledDistribution {
    pub fn new(marginal: Distribution, labeler: Model) -> Result<Self> {
        if marginal.dim() != labeler.dim() {
            return Err(Error::DimensionMismatch {
                expected: marginal.dim(),
                got: labeler.dim(),
            });
        }
        Ok(LabeledDistribution { marginal, labeler })
    }

    /// Draw labeled examples. When `norm_bound` is set, points are projected
    /// onto the closed ball of that radius so the result is valid for a
    /// bounded problem.
    pub fn sample(&self, n: usize, seed: u64, norm_bound: Option<f64>) -> Result<Vec<LabeledExample>> {
        let points = self.marginal.sample(n, seed);
        let mut rng = rng_from_seed(crate::rng::derive_seed(seed, "labels", 0));
        let mut out = Vec::with_capacity(n);
        for x in points {
            let x = match norm_bound {
                Some(b) => FeatureVector::new(crate::models::project_to_ball(&x, b))?,
                None => x,
            };
            let p = self.labeler.predict(&x)?;
            let y = if rng.gen::<f64>() < p { 1.0 } else { -1.0 };
            out.push(LabeledExample::new(x, y)?);
        }
        Ok(out)
    }
}
