//! Ensembles of changed models under the supported generation regimes, and
//! estimation of the model-change profile: expected L2 distance, subgaussian
//! parameter, uniform Lipschitz bound, and the regime classification
//! (mean-preserving change vs. merely distance-bounded change).

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{l2_model_distance, Distribution, LabeledDistribution};
use crate::error::{Error, Result};
use crate::models::{ensemble_lipschitz, FeatureVector, Model};
use crate::rng::{derive_seed, rng_from_seed, uniform_in_ball};
use crate::stats::{sample_variance, McEstimate};
use crate::training::{gd_train, joint_divergence_trace, BoundedProblem, LabeledExample};

/// Bounded outputs in [0,1] are (1/2)^2-subgaussian about their mean, so
/// this is always a sound parameter.
pub const NU_FALLBACK: f64 = 0.5;

/// Lambda grid for the empirical log-MGF estimate of the subgaussian
/// parameter.
const NU_LAMBDA_GRID: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 8.0];

/// Test points drawn from the data marginal for the pointwise mean-zero
/// check, and bootstrap resamples per point.
const NOMC_TEST_POINTS: usize = 20;
const NOMC_BOOTSTRAP: usize = 2000;

/// Deviations below this are indistinguishable from float summation noise
/// and never count as rejections.
const NOMC_NUMERICAL_TOL: f64 = 1e-12;

/// Where replacement examples come from in a perturbed retraining.
#[derive(Debug, Clone)]
pub enum ReplacementSource {
    /// Fresh draws from a labeled distribution, projected to the instance
    /// ball.
    Resample { dist: LabeledDistribution, norm_bound: f64 },
    /// A fixed list of examples (length r), identical for every member.
    Explicit { examples: Vec<LabeledExample> },
}

/// Which examples of the original dataset get replaced.
#[derive(Debug, Clone)]
pub struct PerturbationSpec {
    pub r: usize,
    /// Defaults to the last `r` positions when absent.
    pub positions: Option<Vec<usize>>,
    pub source: ReplacementSource,
}

impl PerturbationSpec {
    fn resolve_positions(&self, n: usize) -> Result<Vec<usize>> {
        if self.r > n {
            return Err(Error::PerturbationSpec(format!(
                "cannot replace r = {} of n = {n} examples",
                self.r
            )));
        }
        let positions = match &self.positions {
            Some(p) => p.clone(),
            None => (n - self.r..n).collect(),
        };
        if positions.len() != self.r {
            return Err(Error::PerturbationSpec("positions must have length r".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for &p in &positions {
            if p >= n || !seen.insert(p) {
                return Err(Error::PerturbationSpec("positions must be distinct and in range".into()));
            }
        }
        if let ReplacementSource::Explicit { examples } = &self.source {
            if examples.len() != self.r {
                return Err(Error::PerturbationSpec("explicit replacements must have length r".into()));
            }
        }
        Ok(positions)
    }
}

/// The training run an ensemble retrains against.
#[derive(Debug, Clone, Copy)]
pub struct RetrainSetup<'a> {
    pub problem: &'a BoundedProblem,
    pub data: &'a [LabeledExample],
    pub step_sizes: &'a [f64],
    pub theta0: &'a [f64],
}

/// Ensemble generation regimes.
#[derive(Debug)]
#[allow(clippy::large_enum_variant)]
pub enum EnsembleGenerator<'a> {
    /// Retrain after replacing `r` examples per member.
    RetrainPerturbed {
        setup: RetrainSetup<'a>,
        perturbation: PerturbationSpec,
    },
    /// Retrain on a bootstrap resample of the dataset per member.
    RetrainBootstrap { setup: RetrainSetup<'a> },
    /// Add a uniform-in-ball perturbation of the given radius to the
    /// parameters, optionally around a shifted center.
    ParameterBall {
        base: &'a Model,
        radius: f64,
        offset: Option<Vec<f64>>,
    },
    /// Clamped constant output offset, drawn uniformly from `[-a, a]` per
    /// member.
    OutputNoise { base: &'a Model, amplitude: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    RetrainPerturbed,
    RetrainBootstrap,
    ParameterBall,
    OutputNoise,
}

/// Divergence bookkeeping for retraining generators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrainDiagnostics {
    /// Final parameter divergence per member.
    pub member_delta_final: Vec<f64>,
    /// Analytic divergence bound per member (`2 L sum eta over differing`).
    pub member_bound: Vec<f64>,
    /// Full divergence trace of the first member.
    pub first_divergence: Vec<f64>,
    /// Running analytic bound along the first member's trace.
    pub first_bound_prefix: Vec<f64>,
}

/// An ensemble of changed models around an original.
#[derive(Debug, Clone)]
pub struct ModelChangeEnsemble {
    pub original: Model,
    pub members: Vec<Model>,
    pub kind: GeneratorKind,
    pub seed: u64,
    pub retrain: Option<RetrainDiagnostics>,
}

/// Retrain once per member against a dataset built by `build_changed`,
/// collecting joint-divergence diagnostics; member index and seed for each.
fn retrain_ensemble<F>(
    setup: &RetrainSetup<'_>,
    count: usize,
    seed: u64,
    kind: GeneratorKind,
    seed_label: &str,
    build_changed: F,
) -> Result<ModelChangeEnsemble>
where
    F: Fn(u64) -> Result<Vec<LabeledExample>> + Sync,
{
    // member model, final delta, bound, delta trace, bound prefix
    type MemberRecord = (Model, f64, f64, Vec<f64>, Vec<f64>);
    let original_trace = gd_train(setup.problem, setup.data, setup.step_sizes, setup.theta0, false)?;
    let original = original_trace.to_model()?;
    let results: Vec<Result<MemberRecord>> = (0..count)
        .into_par_iter()
        .map(|j| {
            let member_seed = derive_seed(seed, seed_label, j as u64);
            let changed = build_changed(member_seed)?;
            let joint = joint_divergence_trace(
                setup.problem,
                setup.data,
                &changed,
                setup.step_sizes,
                setup.theta0,
            )?;
            Ok((
                joint.trace_changed.to_model()?,
                *joint.deltas.last().unwrap(),
                joint.bound,
                joint.deltas,
                joint.bound_prefix,
            ))
        })
        .collect();
    let mut members = Vec::with_capacity(count);
    let mut diag = RetrainDiagnostics {
        member_delta_final: Vec::with_capacity(count),
        member_bound: Vec::with_capacity(count),
        first_divergence: Vec::new(),
        first_bound_prefix: Vec::new(),
    };
    for (j, r) in results.into_iter().enumerate() {
        let (model, delta, bound, deltas, prefix) = r?;
        if j == 0 {
            diag.first_divergence = deltas;
            diag.first_bound_prefix = prefix;
        }
        members.push(model);
        diag.member_delta_final.push(delta);
        diag.member_bound.push(bound);
    }
    Ok(ModelChangeEnsemble {
        original,
        members,
        kind,
        seed,
        retrain: Some(diag),
    })
}

/// Generate `count` changed models. Members derive independent seeds from
/// `(seed, index)`, so generation parallelizes without affecting results.
pub fn generate_ensemble(
    generator: &EnsembleGenerator<'_>,
    count: usize,
    seed: u64,
) -> Result<ModelChangeEnsemble> {
    if count == 0 {
        return Err(Error::config("ensemble needs at least one member"));
    }
    match generator {
        EnsembleGenerator::RetrainPerturbed { setup, perturbation } => {
            let positions = perturbation.resolve_positions(setup.data.len())?;
            retrain_ensemble(
                setup,
                count,
                seed,
                GeneratorKind::RetrainPerturbed,
                "retrain-member",
                |member_seed| {
                    let replacements: Vec<LabeledExample> = match &perturbation.source {
                        ReplacementSource::Resample { dist, norm_bound } => {
                            dist.sample(perturbation.r, member_seed, Some(*norm_bound))?
                        }
                        ReplacementSource::Explicit { examples } => examples.clone(),
                    };
                    let mut changed = setup.data.to_vec();
                    for (pos, repl) in positions.iter().zip(replacements) {
                        changed[*pos] = repl;
                    }
                    Ok(changed)
                },
            )
        }
        EnsembleGenerator::RetrainBootstrap { setup } => {
            let n = setup.data.len();
            retrain_ensemble(
                setup,
                count,
                seed,
                GeneratorKind::RetrainBootstrap,
                "bootstrap-member",
                |member_seed| {
                    let mut rng = rng_from_seed(member_seed);
                    Ok((0..n).map(|_| setup.data[rng.gen_range(0..n)].clone()).collect())
                },
            )
        }
        EnsembleGenerator::ParameterBall { base, radius, offset } => {
            if !(radius.is_finite() && *radius >= 0.0) {
                return Err(Error::config("parameter-ball radius must be >= 0"));
            }
            let (weights, bias) = match base.kind() {
                crate::models::ModelKind::LinearSigmoid { weights, bias } => (weights.clone(), *bias),
                _ => {
                    return Err(Error::config(
                        "parameter-ball generation needs a linear-sigmoid base model",
                    ))
                }
            };
            if let Some(off) = offset {
                if off.len() != weights.len() {
                    return Err(Error::DimensionMismatch {
                        expected: weights.len(),
                        got: off.len(),
                    });
                }
            }
            let members: Result<Vec<Model>> = (0..count)
                .map(|j| {
                    let mut rng = rng_from_seed(derive_seed(seed, "ball-member", j as u64));
                    let u = uniform_in_ball(&mut rng, weights.len(), *radius);
                    let theta: Vec<f64> = weights
                        .iter()
                        .enumerate()
                        .map(|(a, w)| w + u[a] + offset.as_ref().map_or(0.0, |o| o[a]))
                        .collect();
                    Model::linear_sigmoid(theta, bias)
                })
                .collect();
            Ok(ModelChangeEnsemble {
                original: (*base).clone(),
                members: members?,
                kind: GeneratorKind::ParameterBall,
                seed,
                retrain: None,
            })
        }
        EnsembleGenerator::OutputNoise { base, amplitude } => {
            if !(amplitude.is_finite() && *amplitude >= 0.0) {
                return Err(Error::config("output-noise amplitude must be >= 0"));
            }
            let members: Result<Vec<Model>> = (0..count)
                .map(|j| {
                    let mut rng = rng_from_seed(derive_seed(seed, "noise-member", j as u64));
                    let c = amplitude * (2.0 * rng.gen::<f64>() - 1.0);
                    Model::wrapped((*base).clone(), 1.0, c)
                })
                .collect();
            Ok(ModelChangeEnsemble {
                original: (*base).clone(),
                members: members?,
                kind: GeneratorKind::OutputNoise,
                seed,
                retrain: None,
            })
        }
    }
}

/// Regime classification of an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Pointwise mean-zero test passed; the stricter change model applies.
    NomcConsistent,
    /// Only the distance-based conditions hold.
    GomcOnly,
    /// No uniform Lipschitz bound available.
    Neither,
}

/// Estimated change parameters for an ensemble.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelChangeProfile {
    /// Estimate of the expected L2(mu) distance between original and
    /// changed models.
    pub delta: McEstimate,
    /// Per-member distance estimates behind `delta`.
    pub member_distances: Vec<f64>,
    /// Subgaussian parameter estimate from the empirical log-MGF, clamped
    /// to the bounded-range fallback.
    pub nu: f64,
    pub nu_fallback: f64,
    /// Uniform Lipschitz bound over original and members.
    pub gamma: f64,
    pub regime: Regime,
    pub nomc: NomcReport,
}

/// Estimate the change profile of an ensemble against the data marginal.
pub fn estimate_profile(
    ens: &ModelChangeEnsemble,
    mu: &Distribution,
    n_mc: usize,
    seed: u64,
) -> Result<ModelChangeProfile> {
    let count = ens.members.len();
    let distances: Vec<Result<McEstimate>> = ens
        .members
        .par_iter()
        .enumerate()
        .map(|(j, m)| l2_model_distance(&ens.original, m, mu, n_mc, derive_seed(seed, "l2", j as u64)))
        .collect();
    let mut member_distances = Vec::with_capacity(count);
    let mut single_stderr = 0.0;
    for d in distances {
        let d = d?;
        single_stderr = d.stderr;
        member_distances.push(d.value);
    }
    let delta = if count >= 2 {
        let (mean, se) = crate::stats::mean_and_stderr(&member_distances);
        McEstimate { value: mean, stderr: se, n: count }
    } else {
        McEstimate { value: member_distances[0], stderr: single_stderr, n: 1 }
    };

    let nu = if count >= 2 {
        estimate_nu(&member_distances, delta.value)
    } else {
        NU_FALLBACK
    };

    let gamma = ensemble_lipschitz(std::iter::once(&ens.original).chain(&ens.members))?;

    let test_points = mu.sample(NOMC_TEST_POINTS, derive_seed(seed, "nomc-points", 0));
    let nomc = check_nomc(ens, &test_points, NOMC_BOOTSTRAP, derive_seed(seed, "nomc-boot", 0))?;
    let regime = if !nomc.rejected {
        Regime::NomcConsistent
    } else if gamma.is_finite() {
        Regime::GomcOnly
    } else {
        Regime::Neither
    };

    Ok(ModelChangeProfile {
        delta,
        member_distances,
        nu,
        nu_fallback: NU_FALLBACK,
        gamma,
        regime,
        nomc,
    })
}

/// Max over the lambda grid of `sqrt(2 phi(lambda)) / lambda` where `phi`
/// is the empirical log-MGF of the centered distances, clamped to the
/// bounded-range fallback.
fn estimate_nu(distances: &[f64], mean: f64) -> f64 {
    let mut best: f64 = 0.0;
    for lambda in NU_LAMBDA_GRID {
        let mgf = distances
            .iter()
            .map(|d| (lambda * (d - mean)).exp())
            .sum::<f64>()
            / distances.len() as f64;
        let phi = mgf.ln().max(0.0);
        best = best.max((2.0 * phi).sqrt() / lambda);
    }
    best.min(NU_FALLBACK)
}

/// Pointwise check of the mean-preserving change conditions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NomcReport {
    /// Worst absolute deviation of the member mean from the original
    /// output over the test points.
    pub max_mean_deviation: f64,
    /// Worst member-output variance over the test points.
    pub max_variance: f64,
    /// Whether a finite uniform Lipschitz bound exists for the ensemble.
    pub lipschitz_ok: bool,
    /// Set when fewer than 10 members make the bootstrap weak.
    pub low_power: bool,
    /// True when some test point rejects the mean-zero hypothesis at 99%.
    pub rejected: bool,
    /// Test points skipped because a member's output clamp was active
    /// there (the mean-zero construction is exact only without clamping).
    pub excluded_points: usize,
    /// Points actually tested.
    pub tested_points: usize,
}

/// Bootstrap test of `E[M(x)] = m(x)` at each test point plus a variance
/// estimate. Rejection at any point (99% percentile interval excluding
/// zero) classifies the ensemble as not mean-preserving.
pub fn check_nomc(
    ens: &ModelChangeEnsemble,
    test_points: &[FeatureVector],
    n_boot: usize,
    seed: u64,
) -> Result<NomcReport> {
    if test_points.is_empty() {
        return Err(Error::invalid("check_nomc needs at least one test point"));
    }
    if n_boot == 0 {
        return Err(Error::invalid("check_nomc needs n_boot >= 1"));
    }
    let j = ens.members.len();
    let mut max_mean_deviation: f64 = 0.0;
    let mut max_variance: f64 = 0.0;
    let mut rejected = false;
    let mut excluded = 0usize;
    for (pi, x) in test_points.iter().enumerate() {
        let mut clamped = false;
        for m in &ens.members {
            if m.clamps_at(x)? {
                clamped = true;
                break;
            }
        }
        if clamped {
            excluded += 1;
            continue;
        }
        let mx = ens.original.predict(x)?;
        let values: Vec<f64> = ens
            .members
            .iter()
            .map(|m| m.predict(x))
            .collect::<Result<_>>()?;
        let mean = values.iter().sum::<f64>() / j as f64;
        let dev = mean - mx;
        max_mean_deviation = max_mean_deviation.max(dev.abs());
        max_variance = max_variance.max(sample_variance(&values));

        // percentile bootstrap over members
        let mut rng = rng_from_seed(derive_seed(seed, "point", pi as u64));
        let mut boot = Vec::with_capacity(n_boot);
        for _ in 0..n_boot {
            let mut acc = 0.0;
            for _ in 0..j {
                acc += values[rng.gen_range(0..j)];
            }
            boot.push(acc / j as f64 - mx);
        }
        boot.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = boot[((n_boot as f64 * 0.005) as usize).min(n_boot - 1)];
        let hi = boot[((n_boot as f64 * 0.995) as usize).min(n_boot - 1)];
        if lo > NOMC_NUMERICAL_TOL || hi < -NOMC_NUMERICAL_TOL {
            rejected = true;
        }
    }
    let gamma = ensemble_lipschitz(std::iter::once(&ens.original).chain(&ens.members))?;
    Ok(NomcReport {
        max_mean_deviation,
        max_variance,
        lipschitz_ok: gamma.is_finite(),
        low_power: j < 10,
        rejected,
        excluded_points: excluded,
        tested_points: test_points.len() - excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::l2_norm;

    fn toy_setup(n: usize, seed: u64) -> (BoundedProblem, Vec<LabeledExample>, Vec<f64>, Vec<f64>) {
        let problem = BoundedProblem::new(1.0).unwrap();
        let marginal = Distribution::gaussian(vec![0.0, 0.0], 0.25).unwrap();
        let labeler = Model::linear_sigmoid(vec![2.0, -1.0], 0.0).unwrap();
        let dist = LabeledDistribution::new(marginal, labeler).unwrap();
        let data = dist.sample(n, seed, Some(1.0)).unwrap();
        let eta = 1.0 / problem.loss.smoothness();
        let step_sizes = vec![eta; n];
        (problem, data, step_sizes, vec![0.0, 0.0])
    }

    fn resample_source() -> ReplacementSource {
        let marginal = Distribution::gaussian(vec![0.0, 0.0], 0.25).unwrap();
        let labeler = Model::linear_sigmoid(vec![2.0, -1.0], 0.0).unwrap();
        ReplacementSource::Resample {
            dist: LabeledDistribution::new(marginal, labeler).unwrap(),
            norm_bound: 1.0,
        }
    }

    #[test]
    fn unperturbed_retraining_reproduces_the_original() {
        let (problem, data, etas, theta0) = toy_setup(40, 1);
        let gen = EnsembleGenerator::RetrainPerturbed {
            setup: RetrainSetup { problem: &problem, data: &data, step_sizes: &etas, theta0: &theta0 },
            perturbation: PerturbationSpec { r: 0, positions: None, source: resample_source() },
        };
        let ens = generate_ensemble(&gen, 5, 7).unwrap();
        for m in &ens.members {
            assert_eq!(m, &ens.original);
        }
        let diag = ens.retrain.unwrap();
        assert!(diag.member_delta_final.iter().all(|d| *d == 0.0));
        assert!(diag.member_bound.iter().all(|b| *b == 0.0));
    }

    #[test]
    fn zero_radius_ball_reproduces_the_original() {
        let base = Model::linear_sigmoid(vec![0.4, -0.6], 0.1).unwrap();
        let gen = EnsembleGenerator::ParameterBall { base: &base, radius: 0.0, offset: None };
        let ens = generate_ensemble(&gen, 4, 3).unwrap();
        for m in &ens.members {
            assert_eq!(m, &base);
        }
    }

    #[test]
    fn retrain_members_respect_divergence_bounds() {
        let (problem, data, etas, theta0) = toy_setup(60, 2);
        let gen = EnsembleGenerator::RetrainPerturbed {
            setup: RetrainSetup { problem: &problem, data: &data, step_sizes: &etas, theta0: &theta0 },
            perturbation: PerturbationSpec { r: 2, positions: None, source: resample_source() },
        };
        let ens = generate_ensemble(&gen, 20, 11).unwrap();
        let diag = ens.retrain.as_ref().unwrap();
        for (d, b) in diag.member_delta_final.iter().zip(&diag.member_bound) {
            assert!(d <= b, "delta {d} exceeds bound {b}");
        }
        // measured L2(mu) distances stay below the theorem bound
        let mu = Distribution::gaussian(vec![0.0, 0.0], 0.25).unwrap();
        let loss = problem.loss;
        for (j, m) in ens.members.iter().enumerate() {
            let est = l2_model_distance(&ens.original, m, &mu, 20_000, 100 + j as u64).unwrap();
            let bound = diag.member_bound[j] * loss.lipschitz() / loss.admissibility();
            assert!(
                est.value <= bound + 3.0 * est.stderr,
                "member {j}: {} > {bound}",
                est.value
            );
        }
    }

    #[test]
    fn ensemble_generation_is_deterministic() {
        let (problem, data, etas, theta0) = toy_setup(30, 3);
        let make = || {
            let gen = EnsembleGenerator::RetrainPerturbed {
                setup: RetrainSetup { problem: &problem, data: &data, step_sizes: &etas, theta0: &theta0 },
                perturbation: PerturbationSpec { r: 3, positions: None, source: resample_source() },
            };
            generate_ensemble(&gen, 8, 42).unwrap()
        };
        let a = make();
        let b = make();
        assert_eq!(a.members, b.members);
    }

    #[test]
    fn profile_of_copies_is_degenerate_and_mean_preserving() {
        let base = Model::linear_sigmoid(vec![1.0, 0.5], 0.0).unwrap();
        let gen = EnsembleGenerator::ParameterBall { base: &base, radius: 0.0, offset: None };
        let ens = generate_ensemble(&gen, 12, 5).unwrap();
        let mu = Distribution::gaussian(vec![0.0, 0.0], 1.0).unwrap();
        let profile = estimate_profile(&ens, &mu, 2000, 9).unwrap();
        assert_eq!(profile.delta.value, 0.0);
        assert_eq!(profile.regime, Regime::NomcConsistent);
        assert!(profile.nomc.max_mean_deviation < 1e-12);
        assert!(profile.nomc.max_variance < 1e-12);
        assert!(profile.gamma >= base.lipschitz_bound());
    }

    #[test]
    fn nu_never_exceeds_fallback() {
        let distances = vec![0.0, 1.0, 0.0, 1.0, 0.5, 0.9, 0.1];
        let mean = distances.iter().sum::<f64>() / distances.len() as f64;
        assert!(estimate_nu(&distances, mean) <= NU_FALLBACK);
        // nearly constant distances give a tiny parameter
        let tight = vec![0.3000, 0.3001, 0.2999, 0.3000];
        assert!(estimate_nu(&tight, 0.3) < 0.01);
    }

    #[test]
    fn symmetric_offset_pair_passes_mean_zero_where_unclamped() {
        // members m + 0.1 and m - 0.1 with outputs kept away from the clamp
        let base = Model::linear_sigmoid(vec![0.5, 0.5], 0.0).unwrap();
        let up = Model::wrapped(base.clone(), 1.0, 0.1).unwrap();
        let down = Model::wrapped(base.clone(), 1.0, -0.1).unwrap();
        let ens = ModelChangeEnsemble {
            original: base,
            members: vec![up, down],
            kind: GeneratorKind::OutputNoise,
            seed: 0,
            retrain: None,
        };
        let points: Vec<FeatureVector> = Distribution::gaussian(vec![0.0, 0.0], 0.2)
            .unwrap()
            .sample(10, 3);
        let report = check_nomc(&ens, &points, 500, 4).unwrap();
        assert!(!report.rejected);
        assert!(report.max_mean_deviation < 1e-12);
        assert!(report.low_power);
    }

    #[test]
    fn output_noise_profile_matches_uniform_moments() {
        let base = Model::linear_sigmoid(vec![0.3, -0.2], 0.0).unwrap();
        let amplitude = 0.1;
        let gen = EnsembleGenerator::OutputNoise { base: &base, amplitude };
        let ens = generate_ensemble(&gen, 60, 17).unwrap();
        let points = Distribution::gaussian(vec![0.0, 0.0], 0.2).unwrap().sample(10, 5);
        let report = check_nomc(&ens, &points, 2000, 6).unwrap();
        assert!(!report.rejected, "mean-zero rejected: {report:?}");
        assert_eq!(report.excluded_points, 0);
        // offsets are constant per member, so the pointwise variance equals
        // the sample variance of the drawn offsets
        let offsets: Vec<f64> = ens
            .members
            .iter()
            .map(|m| match m.kind() {
                crate::models::ModelKind::Wrapped { offset, .. } => *offset,
                _ => unreachable!(),
            })
            .collect();
        let var = sample_variance(&offsets);
        assert!((report.max_variance - var).abs() < 1e-12);
        // and is close to a^2/3
        let expected = amplitude * amplitude / 3.0;
        assert!((var - expected).abs() < 0.5 * expected, "var {var} vs {expected}");

        // a mean-preserving ensemble still carries valid distance-based
        // parameters (the weaker conditions nest inside the stronger ones)
        let mu = Distribution::gaussian(vec![0.0, 0.0], 0.2).unwrap();
        let profile = estimate_profile(&ens, &mu, 2000, 19).unwrap();
        assert_eq!(profile.regime, Regime::NomcConsistent);
        assert!(profile.delta.value >= 0.0 && profile.delta.value <= 1.0);
        assert!(profile.nu <= NU_FALLBACK);
        assert!(profile.gamma.is_finite());
    }

    #[test]
    fn biased_parameter_ball_is_rejected_by_the_mean_test() {
        let base = Model::linear_sigmoid(vec![1.0, 0.0], 0.0).unwrap();
        let gen = EnsembleGenerator::ParameterBall {
            base: &base,
            radius: 0.05,
            offset: Some(vec![0.8, 0.3]),
        };
        let ens = generate_ensemble(&gen, 40, 23).unwrap();
        let points = Distribution::gaussian(vec![0.5, 0.0], 0.2).unwrap().sample(10, 7);
        let report = check_nomc(&ens, &points, 2000, 8).unwrap();
        assert!(report.rejected);
        assert!(report.max_mean_deviation > 0.02);
    }

    #[test]
    fn retrain_with_corrupted_replacements_is_gomc_only() {
        let (problem, data, etas, theta0) = toy_setup(80, 29);
        // replacements labeled by the inverted model: a systematic pull
        let marginal = Distribution::gaussian(vec![0.0, 0.0], 0.25).unwrap();
        let labeler = Model::linear_sigmoid(vec![-2.0, 1.0], 0.0).unwrap();
        let source = ReplacementSource::Resample {
            dist: LabeledDistribution::new(marginal.clone(), labeler).unwrap(),
            norm_bound: 1.0,
        };
        let gen = EnsembleGenerator::RetrainPerturbed {
            setup: RetrainSetup { problem: &problem, data: &data, step_sizes: &etas, theta0: &theta0 },
            perturbation: PerturbationSpec { r: 4, positions: None, source },
        };
        let ens = generate_ensemble(&gen, 40, 31).unwrap();
        let profile = estimate_profile(&ens, &marginal, 5000, 33).unwrap();
        assert_eq!(profile.regime, Regime::GomcOnly);
        assert!(profile.delta.value > 0.0);
        assert!(profile.nu <= NU_FALLBACK);
        assert!(profile.gamma >= ens.original.lipschitz_bound());
    }

    #[test]
    fn explicit_replacements_give_identical_members() {
        let (problem, data, etas, theta0) = toy_setup(20, 37);
        let replacement = LabeledExample::new(
            FeatureVector::new(vec![0.5, -0.5]).unwrap(),
            1.0,
        )
        .unwrap();
        let gen = EnsembleGenerator::RetrainPerturbed {
            setup: RetrainSetup { problem: &problem, data: &data, step_sizes: &etas, theta0: &theta0 },
            perturbation: PerturbationSpec {
                r: 1,
                positions: None,
                source: ReplacementSource::Explicit { examples: vec![replacement] },
            },
        };
        let ens = generate_ensemble(&gen, 3, 41).unwrap();
        assert_eq!(ens.members[0], ens.members[1]);
        assert_eq!(ens.members[1], ens.members[2]);
    }

    #[test]
    fn perturbation_spec_validation() {
        let spec = PerturbationSpec { r: 5, positions: None, source: resample_source() };
        assert!(matches!(spec.resolve_positions(3), Err(Error::PerturbationSpec(_))));
        let spec = PerturbationSpec {
            r: 2,
            positions: Some(vec![1, 1]),
            source: resample_source(),
        };
        assert!(matches!(spec.resolve_positions(5), Err(Error::PerturbationSpec(_))));
    }

    #[test]
    fn bootstrap_ensemble_trains_and_stays_in_ball() {
        let (problem, data, etas, theta0) = toy_setup(40, 43);
        let gen = EnsembleGenerator::RetrainBootstrap {
            setup: RetrainSetup { problem: &problem, data: &data, step_sizes: &etas, theta0: &theta0 },
        };
        let ens = generate_ensemble(&gen, 6, 47).unwrap();
        assert_eq!(ens.members.len(), 6);
        for m in &ens.members {
            if let crate::models::ModelKind::LinearSigmoid { weights, .. } = m.kind() {
                assert!(l2_norm(weights) <= 1.0 + 1e-9);
            }
        }
    }
}
