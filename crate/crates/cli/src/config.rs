//! Experiment configuration: TOML schema, validation, and hashing.
//!
//! The schema is versioned and strict: unknown keys are errors, every
//! referenced parameter is validated before any computation runs, and the
//! hash of the effective config (after a seed override) is embedded in all
//! outputs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use recourse_core::counterfactual::Norm;
use recourse_core::distributions::{Distribution, Gaussian, LabeledDistribution};
use recourse_core::models::Model;

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub data: DataSpec,
    pub train: TrainSpec,
    pub perturb: PerturbSpec,
    pub counterfactual: CounterfactualSpec,
    pub stability: StabilitySpec,
    pub bounds: BoundsSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    /// Number of training examples.
    pub n: usize,
    /// Instance-norm bound B; training data is projected onto this ball.
    pub norm_bound: f64,
    pub marginal: DistributionSpec,
    pub labeler: LinearModelSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearModelSpec {
    pub weights: Vec<f64>,
    #[serde(default)]
    pub bias: f64,
}

impl LinearModelSpec {
    pub fn build(&self) -> Result<Model> {
        Ok(Model::linear_sigmoid(self.weights.clone(), self.bias)?)
    }
}

/// Distribution spec mirroring the library kinds; `dim` is explicit and
/// validated against the parameter vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DistributionSpec {
    Gaussian {
        dim: usize,
        mean: Vec<f64>,
        sigma2: VarianceSpec,
    },
    GaussianMixture {
        dim: usize,
        weights: Vec<f64>,
        components: Vec<MixtureComponentSpec>,
    },
    UniformBox {
        dim: usize,
        bounds: Vec<[f64; 2]>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VarianceSpec {
    Isotropic(f64),
    Diagonal(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponentSpec {
    pub mean: Vec<f64>,
    pub sigma2: VarianceSpec,
}

impl DistributionSpec {
    pub fn dim(&self) -> usize {
        match self {
            DistributionSpec::Gaussian { dim, .. }
            | DistributionSpec::GaussianMixture { dim, .. }
            | DistributionSpec::UniformBox { dim, .. } => *dim,
        }
    }

    pub fn build(&self) -> Result<Distribution> {
        let dist = match self {
            DistributionSpec::Gaussian { dim, mean, sigma2 } => {
                if mean.len() != *dim {
                    return Err(CliError::Config("gaussian: dim does not match mean length".into()));
                }
                match sigma2 {
                    VarianceSpec::Isotropic(s2) => Distribution::gaussian(mean.clone(), *s2)?,
                    VarianceSpec::Diagonal(d) => {
                        Distribution::gaussian_diagonal(mean.clone(), d.clone())?
                    }
                }
            }
            DistributionSpec::GaussianMixture { dim, weights, components } => {
                let comps: Vec<Gaussian> = components
                    .iter()
                    .map(|c| {
                        if c.mean.len() != *dim {
                            return Err(CliError::Config(
                                "mixture component: dim does not match mean length".into(),
                            ));
                        }
                        Ok(match &c.sigma2 {
                            VarianceSpec::Isotropic(s2) => Gaussian::isotropic(c.mean.clone(), *s2)?,
                            VarianceSpec::Diagonal(d) => Gaussian::new(
                                c.mean.clone(),
                                recourse_core::distributions::Covariance::Diagonal(d.clone()),
                            )?,
                        })
                    })
                    .collect::<Result<_>>()?;
                Distribution::mixture(weights.clone(), comps)?
            }
            DistributionSpec::UniformBox { dim, bounds } => {
                if bounds.len() != *dim {
                    return Err(CliError::Config("uniform box: dim does not match bounds".into()));
                }
                let lo = bounds.iter().map(|b| b[0]).collect();
                let hi = bounds.iter().map(|b| b[1]).collect();
                Distribution::uniform_box(lo, hi)?
            }
        };
        Ok(dist)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    /// Constant step size; mutually exclusive with `step_sizes`.
    #[serde(default)]
    pub step_size: Option<f64>,
    /// Per-step sizes, length n.
    #[serde(default)]
    pub step_sizes: Option<Vec<f64>>,
    /// Initial parameters; zeros when absent.
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    /// Allow step sizes beyond 2/alpha (ablations only).
    #[serde(default)]
    pub allow_unsafe_steps: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSpec {
    /// Number of replaced examples per ensemble member.
    pub r: usize,
    /// Ensemble size.
    pub members: usize,
    /// Replaced positions; the last r positions when absent.
    #[serde(default)]
    pub positions: Option<Vec<usize>>,
    /// Replacement source; the data marginal + labeler when absent.
    #[serde(default)]
    pub source: Option<SourceSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    #[serde(default)]
    pub marginal: Option<DistributionSpec>,
    #[serde(default)]
    pub labeler: Option<LinearModelSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterfactualSpec {
    pub norm: Norm,
    /// `free` searches all of R^d; `manifold` scans the training inputs.
    #[serde(default = "default_mode")]
    pub mode: CounterfactualMode,
    pub queries: Vec<QueryGroupSpec>,
}

fn default_mode() -> CounterfactualMode {
    CounterfactualMode::Free
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CounterfactualMode {
    Free,
    Manifold,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryGroupSpec {
    /// Draw this many negatively classified points from the marginal.
    #[serde(default)]
    pub sample_negatives: Option<usize>,
    /// Explicit query points (must be negatively classified).
    #[serde(default)]
    pub points: Option<Vec<Vec<f64>>>,
    /// CSV file of query points, one row per point (comment lines and a
    /// header starting with "x_0" are skipped).
    #[serde(default)]
    pub points_file: Option<String>,
    #[serde(default)]
    pub margin_slack: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySpec {
    pub k: usize,
    pub sigma2: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSpec {
    pub theorems: Vec<TheoremName>,
    pub k: Vec<usize>,
    pub epsilon: Vec<f64>,
    pub ell: Vec<f64>,
    pub trials: usize,
    /// Output-noise amplitude for the mean-preserving ensemble behind the
    /// Theorem-1-style verification.
    #[serde(default = "default_nomc_amplitude")]
    pub nomc_amplitude: f64,
    /// Monte Carlo samples for kappa and the profile distances.
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
}

fn default_nomc_amplitude() -> f64 {
    0.1
}

fn default_n_mc() -> usize {
    recourse_core::distributions::DEFAULT_N_MC
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TheoremName {
    T1,
    T2,
}

impl std::fmt::Display for TheoremName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TheoremName::T1 => write!(f, "T1"),
            TheoremName::T2 => write!(f, "T2"),
        }
    }
}

impl ExperimentConfig {
    /// Parse and validate, optionally overriding the seed. The hash covers
    /// the effective config.
    pub fn load(path: &std::path::Path, seed_override: Option<u64>) -> Result<ResolvedConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, seed_override)
    }

    pub fn parse(text: &str, seed_override: Option<u64>) -> Result<ResolvedConfig> {
        let mut config: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        if let Some(seed) = seed_override {
            config.seed = seed;
        }
        config.validate()?;
        let hash = config.hash()?;
        Ok(ResolvedConfig { config, hash })
    }

    fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_string(self)
            .map_err(|e| CliError::Internal(format!("config hashing failed: {e}")))?;
        let digest = Sha256::digest(canonical.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(CliError::Config(msg.to_string()));
        if self.schema_version != SCHEMA_VERSION {
            return fail(&format!("unsupported schema_version (expected {SCHEMA_VERSION})"));
        }
        let dim = self.data.marginal.dim();
        if dim == 0 {
            return fail("data dimension must be >= 1");
        }
        if self.data.n == 0 {
            return fail("data.n must be >= 1");
        }
        if !(self.data.norm_bound.is_finite() && self.data.norm_bound > 0.0) {
            return fail("data.norm_bound must be positive");
        }
        if self.data.labeler.weights.len() != dim {
            return fail("data.labeler dimension does not match the marginal");
        }
        self.data.marginal.build()?;
        self.data.labeler.build()?;

        match (&self.train.step_size, &self.train.step_sizes) {
            (Some(_), Some(_)) => return fail("set either train.step_size or train.step_sizes, not both"),
            (None, None) => return fail("one of train.step_size or train.step_sizes is required"),
            (Some(s), None) => {
                if !(s.is_finite() && *s >= 0.0) {
                    return fail("train.step_size must be >= 0");
                }
            }
            (None, Some(v)) => {
                if v.len() != self.data.n {
                    return fail("train.step_sizes must have length data.n");
                }
            }
        }
        if let Some(theta0) = &self.train.theta0 {
            if theta0.len() != dim {
                return fail("train.theta0 dimension does not match the data");
            }
        }

        if self.perturb.r > self.data.n {
            return fail("perturb.r cannot exceed data.n");
        }
        if self.perturb.members == 0 {
            return fail("perturb.members must be >= 1");
        }
        if let Some(pos) = &self.perturb.positions {
            if pos.len() != self.perturb.r {
                return fail("perturb.positions must have length r");
            }
            if pos.iter().any(|p| *p >= self.data.n) {
                return fail("perturb.positions out of range");
            }
        }
        if let Some(source) = &self.perturb.source {
            if let Some(m) = &source.marginal {
                if m.dim() != dim {
                    return fail("perturb.source.marginal dimension mismatch");
                }
                m.build()?;
            }
            if let Some(l) = &source.labeler {
                if l.weights.len() != dim {
                    return fail("perturb.source.labeler dimension mismatch");
                }
                l.build()?;
            }
        }

        if self.counterfactual.queries.is_empty() {
            return fail("counterfactual.queries must not be empty");
        }
        for (g, q) in self.counterfactual.queries.iter().enumerate() {
            let sources = usize::from(q.sample_negatives.is_some())
                + usize::from(q.points.is_some())
                + usize::from(q.points_file.is_some());
            if sources != 1 {
                return fail(&format!(
                    "counterfactual.queries[{g}]: set exactly one of sample_negatives, points, or points_file"
                ));
            }
            if let Some(n) = q.sample_negatives {
                if n == 0 {
                    return fail(&format!("counterfactual.queries[{g}]: sample_negatives must be >= 1"));
                }
            }
            if let Some(pts) = &q.points {
                if pts.is_empty() || pts.iter().any(|p| p.len() != dim) {
                    return fail(&format!("counterfactual.queries[{g}]: bad explicit points"));
                }
            }
            if !(0.0..0.5).contains(&q.margin_slack) {
                return fail(&format!("counterfactual.queries[{g}]: margin_slack must lie in [0, 0.5)"));
            }
        }

        if self.stability.k == 0 {
            return fail("stability.k must be >= 1");
        }
        if !(self.stability.sigma2.is_finite() && self.stability.sigma2 > 0.0) {
            return fail("stability.sigma2 must be positive");
        }
        if !(0.0..=1.0).contains(&self.stability.tau) {
            return fail("stability.tau must lie in [0,1]");
        }

        if self.bounds.theorems.is_empty() {
            return fail("bounds.theorems must not be empty");
        }
        if self.bounds.k.is_empty() || self.bounds.k.contains(&0) {
            return fail("bounds.k must be non-empty positive integers");
        }
        if self.bounds.epsilon.is_empty() || self.bounds.epsilon.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return fail("bounds.epsilon must be non-empty positive reals");
        }
        if self.bounds.ell.is_empty() || self.bounds.ell.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return fail("bounds.ell must be non-empty positive reals");
        }
        if self.bounds.trials == 0 {
            return fail("bounds.trials must be >= 1");
        }
        if !(self.bounds.nomc_amplitude.is_finite() && self.bounds.nomc_amplitude >= 0.0) {
            return fail("bounds.nomc_amplitude must be >= 0");
        }
        if self.bounds.n_mc == 0 {
            return fail("bounds.n_mc must be >= 1");
        }
        Ok(())
    }
}

/// A validated config plus its hash.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub config: ExperimentConfig,
    pub hash: String,
}

impl ResolvedConfig {
    pub fn dim(&self) -> usize {
        self.config.data.marginal.dim()
    }

    pub fn step_sizes(&self) -> Vec<f64> {
        match (&self.config.train.step_size, &self.config.train.step_sizes) {
            (Some(s), None) => vec![*s; self.config.data.n],
            (None, Some(v)) => v.clone(),
            _ => unreachable!("validated config"),
        }
    }

    pub fn theta0(&self) -> Vec<f64> {
        self.config
            .train
            .theta0
            .clone()
            .unwrap_or_else(|| vec![0.0; self.dim()])
    }

    /// Training-data distribution.
    pub fn data_distribution(&self) -> Result<LabeledDistribution> {
        Ok(LabeledDistribution::new(
            self.config.data.marginal.build()?,
            self.config.data.labeler.build()?,
        )?)
    }

    /// Replacement-example distribution (falls back to the data's).
    pub fn replacement_distribution(&self) -> Result<LabeledDistribution> {
        let source = self.config.perturb.source.as_ref();
        let marginal = match source.and_then(|s| s.marginal.as_ref()) {
            Some(m) => m.build()?,
            None => self.config.data.marginal.build()?,
        };
        let labeler = match source.and_then(|s| s.labeler.as_ref()) {
            Some(l) => l.build()?,
            None => self.config.data.labeler.build()?,
        };
        Ok(LabeledDistribution::new(marginal, labeler)?)
    }
}
