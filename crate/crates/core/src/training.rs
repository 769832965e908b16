//! Sequential single-example gradient descent on the bounded logistic
//! problem, the closed-form loss constants, and the update-rule property
//! checkers (expansivity, boundedness, parameter divergence under dataset
//! perturbation).
//!
//! The trainer takes exactly one pass over the dataset in order, one example
//! per step, projecting each iterate onto the unit ball. This matches the
//! structure the divergence bound counts: a pair of datasets differing in
//! `r` positions contributes at most `2 L eta_t` per differing step.

use crate::error::{Error, Result};
use crate::models::{l2_distance, l2_norm, project_to_ball, sigmoid, FeatureVector, Model};
use crate::rng::{rng_from_seed, uniform_in_ball};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Hypothesis-norm bound; iterates are projected onto this ball.
pub const THETA_NORM_BOUND: f64 = 1.0;

/// Slack for the instance-norm-bound check (projection rounding).
const NORM_CHECK_SLACK: f64 = 1e-9;

/// A labeled example with `y` in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub x: FeatureVector,
    pub y: f64,
}

impl LabeledExample {
    pub fn new(x: FeatureVector, y: f64) -> Result<Self> {
        if y != 1.0 && y != -1.0 {
            return Err(Error::invalid("label must be -1 or +1"));
        }
        Ok(LabeledExample { x, y })
    }
}

/// Logistic loss `ln(1 + exp(-y x.theta))` on instances with `||x|| <= B`,
/// together with its closed-form constants on the unit hypothesis ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogisticLoss {
    norm_bound: f64,
    lipschitz: f64,
    smoothness: f64,
    admissibility: f64,
}

impl LogisticLoss {
    pub fn new(norm_bound: f64) -> Result<Self> {
        if !(norm_bound.is_finite() && norm_bound > 0.0) {
            return Err(Error::config("instance norm bound B must be positive"));
        }
        let b = norm_bound;
        Ok(LogisticLoss {
            norm_bound: b,
            lipschitz: b / ((-b).exp() + 1.0),
            smoothness: b * b / 4.0,
            admissibility: 1.0 / (b.exp() + 1.0),
        })
    }

    /// Instance-norm bound B.
    pub fn norm_bound(&self) -> f64 {
        self.norm_bound
    }

    /// L: Lipschitz constant of the loss in theta.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// alpha: smoothness constant of the loss gradient.
    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    /// xi: left-admissibility constant relating loss gaps to margin gaps.
    pub fn admissibility(&self) -> f64 {
        self.admissibility
    }

    fn check_example(&self, z: &LabeledExample) -> Result<()> {
        let norm = l2_norm(&z.x);
        if norm > self.norm_bound + NORM_CHECK_SLACK {
            return Err(Error::config(format!(
                "example norm {norm} exceeds instance bound {}",
                self.norm_bound
            )));
        }
        Ok(())
    }

    /// `ln(1 + exp(-y x.theta))`, evaluated stably for large margins.
    pub fn value(&self, theta: &[f64], z: &LabeledExample) -> Result<f64> {
        self.check_example(z)?;
        let t = -z.y * crate::models::dot(&z.x, theta);
        // ln(1 + e^t) = max(t, 0) + ln(1 + e^-|t|)
        Ok(t.max(0.0) + (-t.abs()).exp().ln_1p())
    }

    /// Analytic gradient `-y x sigmoid(-y x.theta)`.
    pub fn gradient(&self, theta: &[f64], z: &LabeledExample) -> Result<Vec<f64>> {
        self.check_example(z)?;
        let s = sigmoid(-z.y * crate::models::dot(&z.x, theta));
        Ok(z.x.iter().map(|c| -z.y * c * s).collect())
    }

    /// One gradient update `theta - eta * grad(theta; z)` without projection.
    fn update(&self, theta: &[f64], eta: f64, z: &LabeledExample) -> Result<Vec<f64>> {
        let g = self.gradient(theta, z)?;
        Ok(theta.iter().zip(&g).map(|(t, gi)| t - eta * gi).collect())
    }
}

/// The bounded learning problem: instances in the B-ball, hypotheses in the
/// unit ball, logistic loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundedProblem {
    pub loss: LogisticLoss,
}

impl BoundedProblem {
    pub fn new(norm_bound: f64) -> Result<Self> {
        Ok(BoundedProblem { loss: LogisticLoss::new(norm_bound)? })
    }

    /// Maximum safe step size `2 / alpha`.
    pub fn max_step_size(&self) -> f64 {
        2.0 / self.loss.smoothness()
    }

    fn validate_run(
        &self,
        data: &[LabeledExample],
        step_sizes: &[f64],
        theta0: &[f64],
        allow_unsafe_steps: bool,
    ) -> Result<()> {
        if step_sizes.len() != data.len() {
            return Err(Error::config(format!(
                "need one step size per example: {} examples, {} step sizes",
                data.len(),
                step_sizes.len()
            )));
        }
        if l2_norm(theta0) > THETA_NORM_BOUND + NORM_CHECK_SLACK {
            return Err(Error::config("initial parameters must lie in the unit ball"));
        }
        if !allow_unsafe_steps {
            let max = self.max_step_size();
            if let Some(eta) = step_sizes.iter().find(|e| **e > max + 1e-12 || **e < 0.0) {
                return Err(Error::config(format!(
                    "step size {eta} outside [0, 2/alpha] = [0, {max}]; pass allow_unsafe_steps to override"
                )));
            }
        }
        for z in data {
            self.loss.check_example(z)?;
        }
        Ok(())
    }
}

/// Full record of one sequential GD pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrace {
    /// Iterates theta_0 .. theta_n (one more than the number of steps).
    pub thetas: Vec<Vec<f64>>,
    pub step_sizes: Vec<f64>,
    pub example_indices: Vec<usize>,
}

impl TrainingTrace {
    pub fn final_theta(&self) -> &[f64] {
        self.thetas.last().expect("trace always holds theta0")
    }

    /// The trained model: linear-sigmoid with the final parameters.
    pub fn to_model(&self) -> Result<Model> {
        Model::linear_sigmoid(self.final_theta().to_vec(), 0.0)
    }

    /// CSV export: `t, eta_t, example_index, theta_0.., [delta_t]`.
    /// Row `t = 0` is the initial iterate and has empty step fields.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W, deltas: Option<&[f64]>) -> std::io::Result<()> {
        let d = self.thetas[0].len();
        let mut header = String::from("t,eta_t,example_index");
        for a in 0..d {
            header.push_str(&format!(",theta_{a}"));
        }
        if deltas.is_some() {
            header.push_str(",delta_t");
        }
        writeln!(w, "{header}")?;
        for (t, theta) in self.thetas.iter().enumerate() {
            let (eta, idx) = if t == 0 {
                (String::new(), String::new())
            } else {
                (
                    format!("{}", self.step_sizes[t - 1]),
                    format!("{}", self.example_indices[t - 1]),
                )
            };
            let mut row = format!("{t},{eta},{idx}");
            for c in theta {
                row.push_str(&format!(",{c}"));
            }
            if let Some(ds) = deltas {
                row.push_str(&format!(",{}", ds[t]));
            }
            writeln!(w, "{row}")?;
        }
        Ok(())
    }
}

/// One sequential pass of projected gradient descent over `data` in order.
pub fn gd_train(
    problem: &BoundedProblem,
    data: &[LabeledExample],
    step_sizes: &[f64],
    theta0: &[f64],
    allow_unsafe_steps: bool,
) -> Result<TrainingTrace> {
    problem.validate_run(data, step_sizes, theta0, allow_unsafe_steps)?;
    let mut thetas = Vec::with_capacity(data.len() + 1);
    let mut theta = theta0.to_vec();
    thetas.push(theta.clone());
    for (t, z) in data.iter().enumerate() {
        let next = problem.loss.update(&theta, step_sizes[t], z)?;
        theta = project_to_ball(&next, THETA_NORM_BOUND);
        thetas.push(theta.clone());
    }
    Ok(TrainingTrace {
        thetas,
        step_sizes: step_sizes.to_vec(),
        example_indices: (0..data.len()).collect(),
    })
}

/// Worst observed expansion ratio of the update map over sampled pairs.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ExpansivityReport {
    pub max_ratio: f64,
    pub pairs: usize,
}

/// Sample `(theta_1, theta_2, z)` and measure
/// `||G(theta_1) - G(theta_2)|| / ||theta_1 - theta_2||` with the same
/// example on both sides. For the convex smooth logistic loss with
/// `eta <= 2/alpha` the ratio never exceeds 1.
pub fn check_expansive(
    problem: &BoundedProblem,
    eta: f64,
    n_pairs: usize,
    seed: u64,
) -> Result<ExpansivityReport> {
    if eta < 0.0 || eta > problem.max_step_size() + 1e-12 {
        return Err(Error::config("check_expansive requires 0 <= eta <= 2/alpha"));
    }
    let mut rng = rng_from_seed(seed);
    let dim = 3;
    let b = problem.loss.norm_bound();
    let mut max_ratio: f64 = 0.0;
    let mut produced = 0;
    while produced < n_pairs {
        let t1 = uniform_in_ball(&mut rng, dim, THETA_NORM_BOUND);
        let t2 = uniform_in_ball(&mut rng, dim, THETA_NORM_BOUND);
        let dist = l2_distance(&t1, &t2);
        if dist < 1e-8 {
            continue; // degenerate pair
        }
        let z = random_example(&mut rng, dim, b)?;
        let g1 = problem.loss.update(&t1, eta, &z)?;
        let g2 = problem.loss.update(&t2, eta, &z)?;
        max_ratio = max_ratio.max(l2_distance(&g1, &g2) / dist);
        produced += 1;
    }
    Ok(ExpansivityReport { max_ratio, pairs: n_pairs })
}

/// Worst observed step length of the update map.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BoundednessReport {
    pub max_step: f64,
    pub samples: usize,
}

/// Measure `||theta - G(theta)||` over sampled `(theta, z)`; bounded by
/// `eta * L`.
pub fn check_bounded(
    problem: &BoundedProblem,
    eta: f64,
    n_samples: usize,
    seed: u64,
) -> Result<BoundednessReport> {
    let mut rng = rng_from_seed(seed);
    let dim = 3;
    let b = problem.loss.norm_bound();
    let mut max_step: f64 = 0.0;
    for _ in 0..n_samples {
        let theta = uniform_in_ball(&mut rng, dim, THETA_NORM_BOUND);
        let z = random_example(&mut rng, dim, b)?;
        let g = problem.loss.update(&theta, eta, &z)?;
        max_step = max_step.max(l2_distance(&theta, &g));
    }
    Ok(BoundednessReport { max_step, samples: n_samples })
}

fn random_example<R: Rng>(rng: &mut R, dim: usize, b: f64) -> Result<LabeledExample> {
    let x = FeatureVector::new(uniform_in_ball(rng, dim, b))?;
    let y = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    LabeledExample::new(x, y)
}

/// Result of training jointly on two datasets from the same start.
#[derive(Debug, Clone)]
pub struct JointDivergence {
    pub trace_original: TrainingTrace,
    pub trace_changed: TrainingTrace,
    /// `delta_t = ||theta^m_t - theta^M_t||` for `t = 0..=n`.
    pub deltas: Vec<f64>,
    /// Positions where the datasets differ.
    pub differing: Vec<usize>,
    /// Analytic bound `2 L sum of eta_t over differing steps`.
    pub bound: f64,
    /// Running bound after each step (same indexing as `deltas`).
    pub bound_prefix: Vec<f64>,
}

/// Train on `data_original` and `data_changed` from the same initial point
/// and trace the parameter divergence. The datasets must have equal length;
/// differing positions are detected positionally. Each step is checked
/// against the per-step recursion: no growth on shared steps, at most
/// `2 eta_t L` on differing steps.
pub fn joint_divergence_trace(
    problem: &BoundedProblem,
    data_original: &[LabeledExample],
    data_changed: &[LabeledExample],
    step_sizes: &[f64],
    theta0: &[f64],
) -> Result<JointDivergence> {
    if data_original.len() != data_changed.len() {
        return Err(Error::PerturbationSpec(format!(
            "datasets must have equal length: {} vs {}",
            data_original.len(),
            data_changed.len()
        )));
    }
    let trace_original = gd_train(problem, data_original, step_sizes, theta0, false)?;
    let trace_changed = gd_train(problem, data_changed, step_sizes, theta0, false)?;

    let differing: Vec<usize> = data_original
        .iter()
        .zip(data_changed)
        .enumerate()
        .filter_map(|(i, (a, b))| (a != b).then_some(i))
        .collect();

    let l = problem.loss.lipschitz();
    let mut deltas = Vec::with_capacity(data_original.len() + 1);
    let mut bound_prefix = Vec::with_capacity(data_original.len() + 1);
    let mut running_bound = 0.0;
    deltas.push(0.0);
    bound_prefix.push(0.0);
    for t in 0..data_original.len() {
        let delta = l2_distance(&trace_original.thetas[t + 1], &trace_changed.thetas[t + 1]);
        let allowed = if differing.contains(&t) {
            running_bound += 2.0 * step_sizes[t] * l;
            2.0 * step_sizes[t] * l
        } else {
            0.0
        };
        if delta > deltas[t] + allowed + 1e-12 {
            return Err(Error::Internal(format!(
                "divergence recursion violated at step {t}: {} > {} + {allowed}",
                delta, deltas[t]
            )));
        }
        deltas.push(delta);
        bound_prefix.push(running_bound);
    }
    Ok(JointDivergence {
        trace_original,
        trace_changed,
        deltas,
        differing,
        bound: running_bound,
        bound_prefix,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(coords: &[f64]) -> FeatureVector {
        FeatureVector::new(coords.to_vec()).unwrap()
    }

    fn ex(coords: &[f64], y: f64) -> LabeledExample {
        LabeledExample::new(fv(coords), y).unwrap()
    }

    #[test]
    fn loss_constants_at_b_one() {
        let loss = LogisticLoss::new(1.0).unwrap();
        assert!((loss.lipschitz() - 0.7310585786300049).abs() < 1e-15);
        assert_eq!(loss.smoothness(), 0.25);
        assert!((loss.admissibility() - 0.2689414213699951).abs() < 1e-15);
    }

    #[test]
    fn loss_values() {
        let loss = LogisticLoss::new(1.0).unwrap();
        let z = ex(&[1.0, 0.0], 1.0);
        assert!((loss.value(&[0.0, 0.0], &z).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        // y=+1, margin = B = 1
        assert!((loss.value(&[1.0, 0.0], &z).unwrap() - 0.31326168751822286).abs() < 1e-15);
        // y=-1, margin = 1
        let z = ex(&[1.0, 0.0], -1.0);
        assert!((loss.value(&[1.0, 0.0], &z).unwrap() - 1.3132616875182228).abs() < 1e-15);
    }

    #[test]
    fn loss_value_is_finite_for_saturated_margins() {
        let loss = LogisticLoss::new(100.0).unwrap();
        let z = ex(&[100.0], -1.0);
        let v = loss.value(&[1.0], &z).unwrap();
        assert!(v.is_finite() && (v - 100.0).abs() < 1e-9);
    }

    #[test]
    fn loss_rejects_out_of_bound_examples() {
        let loss = LogisticLoss::new(1.0).unwrap();
        let z = ex(&[2.0, 0.0], 1.0);
        assert!(matches!(loss.value(&[0.0, 0.0], &z), Err(Error::Config(_))));
    }

    #[test]
    fn gradient_at_zero_margin() {
        let loss = LogisticLoss::new(1.0).unwrap();
        let z = ex(&[1.0, 0.0], 1.0);
        let g = loss.gradient(&[0.0, 0.0], &z).unwrap();
        assert_eq!(g, vec![-0.5, 0.0]);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let loss = LogisticLoss::new(2.0).unwrap();
        let mut rng = rng_from_seed(5);
        let h = 1e-6;
        for _ in 0..200 {
            let theta = uniform_in_ball(&mut rng, 3, 1.0);
            let z = random_example(&mut rng, 3, 2.0).unwrap();
            let g = loss.gradient(&theta, &z).unwrap();
            for a in 0..3 {
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[a] += h;
                tm[a] -= h;
                let fd = (loss.value(&tp, &z).unwrap() - loss.value(&tm, &z).unwrap()) / (2.0 * h);
                let denom = g[a].abs().max(1e-6);
                assert!((g[a] - fd).abs() / denom < 1e-6, "axis {a}: {} vs {fd}", g[a]);
            }
        }
    }

    #[test]
    fn gradient_vanishes_for_saturated_positive_margin() {
        let loss = LogisticLoss::new(50.0).unwrap();
        let z = ex(&[50.0, 0.0], 1.0);
        let g = loss.gradient(&[1.0, 0.0], &z).unwrap();
        assert!(l2_norm(&g) < 1e-8 * l2_norm(&z.x));
    }

    #[test]
    fn gd_with_no_examples_returns_initial_point() {
        let problem = BoundedProblem::new(1.0).unwrap();
        let trace = gd_train(&problem, &[], &[], &[0.3, 0.1], false).unwrap();
        assert_eq!(trace.thetas, vec![vec![0.3, 0.1]]);
    }

    #[test]
    fn gd_single_step_matches_hand_computation() {
        let problem = BoundedProblem::new(1.0).unwrap();
        let data = vec![ex(&[1.0, 0.0], 1.0)];
        let trace = gd_train(&problem, &data, &[0.1], &[0.0, 0.0], false).unwrap();
        assert_eq!(trace.final_theta(), &[0.05, 0.0]);
    }

    #[test]
    fn gd_is_deterministic() {
        let problem = BoundedProblem::new(1.0).unwrap();
        let mut rng = rng_from_seed(6);
        let data: Vec<LabeledExample> = (0..20)
            .map(|_| random_example(&mut rng, 2, 1.0).unwrap())
            .collect();
        let etas = vec![1.0; 20];
        let a = gd_train(&problem, &data, &etas, &[0.0, 0.0], false).unwrap();
        let b = gd_train(&problem, &data, &etas, &[0.0, 0.0], false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gd_rejects_oversized_steps_unless_overridden() {
        let problem = BoundedProblem::new(1.0).unwrap();
        let data = vec![ex(&[1.0, 0.0], 1.0)];
        let too_big = problem.max_step_size() + 0.5;
        assert!(matches!(
            gd_train(&problem, &data, &[too_big], &[0.0, 0.0], false),
            Err(Error::Config(_))
        ));
        assert!(gd_train(&problem, &data, &[too_big], &[0.0, 0.0], true).is_ok());
    }

    #[test]
    fn gd_reduces_average_loss_on_separable_data() {
        let problem = BoundedProblem::new(1.0).unwrap();
        // separable along the first axis
        let mut rng = rng_from_seed(7);
        let data: Vec<LabeledExample> = (0..100)
            .map(|_| {
                let sign: f64 = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let x0 = sign * (0.3 + 0.6 * rng.gen::<f64>());
                let x1 = 0.2 * (rng.gen::<f64>() - 0.5);
                ex(&crate::models::project_to_ball(&[x0, x1], 1.0), sign)
            })
            .collect();
        let eta = 1.0 / problem.loss.smoothness();
        let etas = vec![eta; data.len()];
        let trace = gd_train(&problem, &data, &etas, &[0.0, 0.0], false).unwrap();
        let avg = |theta: &[f64]| {
            data.iter()
                .map(|z| problem.loss.value(theta, z).unwrap())
                .sum::<f64>()
                / data.len() as f64
        };
        assert!(avg(trace.final_theta()) <= avg(&[0.0, 0.0]));
    }

    #[test]
    fn zero_step_update_is_identity_and_zero_bounded() {
        let problem = BoundedProblem::new(1.0).unwrap();
        let exp = check_expansive(&problem, 0.0, 1000, 8).unwrap();
        assert_eq!(exp.max_ratio, 1.0);
        let bnd = check_bounded(&problem, 0.0, 1000, 8).unwrap();
        assert_eq!(bnd.max_step, 0.0);
    }

    #[test]
    fn expansivity_holds_at_critical_step_size() {
        let problem = BoundedProblem::new(1.0).unwrap();
        let eta = problem.max_step_size();
        let r = check_expansive(&problem, eta, 10_000, 9).unwrap();
        assert!(r.max_ratio <= 1.0 + 1e-9, "max ratio {}", r.max_ratio);
    }

    #[test]
    fn boundedness_holds_at_eta_l() {
        let problem = BoundedProblem::new(1.0).unwrap();
        let eta = 0.1;
        let r = check_bounded(&problem, eta, 10_000, 10).unwrap();
        let cap = eta * problem.loss.lipschitz();
        assert!((cap - 0.07310585786300049).abs() < 1e-15);
        assert!(r.max_step <= cap + 1e-12, "max step {}", r.max_step);
    }

    #[test]
    fn zero_gradient_examples_produce_zero_steps() {
        // x = 0 gives a vanishing gradient for any theta
        let problem = BoundedProblem::new(1.0).unwrap();
        let loss = problem.loss;
        let z = ex(&[0.0, 0.0], 1.0);
        let g = loss.gradient(&[0.5, -0.5], &z).unwrap();
        assert_eq!(l2_norm(&g), 0.0);
    }

    #[test]
    fn joint_divergence_identical_datasets_is_zero() {
        let problem = BoundedProblem::new(1.0).unwrap();
        let mut rng = rng_from_seed(12);
        let data: Vec<LabeledExample> = (0..30)
            .map(|_| random_example(&mut rng, 2, 1.0).unwrap())
            .collect();
        let etas = vec![0.5; 30];
        let j = joint_divergence_trace(&problem, &data, &data, &etas, &[0.0, 0.0]).unwrap();
        assert!(j.deltas.iter().all(|d| *d == 0.0));
        assert_eq!(j.bound, 0.0);
        assert!(j.differing.is_empty());
    }

    #[test]
    fn joint_divergence_single_tail_change_respects_bound() {
        let problem = BoundedProblem::new(1.0).unwrap();
        let mut rng = rng_from_seed(13);
        let data: Vec<LabeledExample> = (0..50)
            .map(|_| random_example(&mut rng, 2, 1.0).unwrap())
            .collect();
        let mut changed = data.clone();
        *changed.last_mut().unwrap() = ex(&[0.0, -1.0], -1.0);
        let etas = vec![0.1; 50];
        let j = joint_divergence_trace(&problem, &data, &changed, &etas, &[0.0, 0.0]).unwrap();
        assert_eq!(j.differing, vec![49]);
        // 2 L eta = 2 * 0.7310585786300049 * 0.1
        assert!((j.bound - 0.14621171572600098).abs() < 1e-15);
        let final_delta = *j.deltas.last().unwrap();
        assert!(final_delta <= j.bound + 1e-12);

        // the model-output gap is controlled by (L / xi) * delta
        let m = j.trace_original.to_model().unwrap();
        let changed_model = j.trace_changed.to_model().unwrap();
        let loss = problem.loss;
        let cap = loss.lipschitz() / loss.admissibility() * final_delta;
        for _ in 0..200 {
            let x = fv(&uniform_in_ball(&mut rng, 2, 1.0));
            let gap = (m.predict(&x).unwrap() - changed_model.predict(&x).unwrap()).abs();
            assert!(gap <= cap + 1e-12, "gap {gap} > cap {cap}");
        }
    }

    #[test]
    fn joint_divergence_rejects_length_mismatch() {
        let problem = BoundedProblem::new(1.0).unwrap();
        let data = vec![ex(&[0.1, 0.0], 1.0)];
        assert!(matches!(
            joint_divergence_trace(&problem, &data, &[], &[0.1], &[0.0, 0.0]),
            Err(Error::PerturbationSpec(_))
        ));
    }

    #[test]
    fn trace_csv_has_expected_shape() {
        let problem = BoundedProblem::new(1.0).unwrap();
        let data = vec![ex(&[1.0, 0.0], 1.0), ex(&[0.0, 1.0], -1.0)];
        let trace = gd_train(&problem, &data, &[0.1, 0.1], &[0.0, 0.0], false).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf, None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,eta_t,example_index,theta_0,theta_1");
        assert_eq!(lines.len(), 4); // header + theta_0..theta_2
        assert!(lines[1].starts_with("0,,,"));
    }

    #[test]
    fn joint_trace_csv_carries_deltas() {
        let problem = BoundedProblem::new(1.0).unwrap();
        let data = vec![ex(&[1.0, 0.0], 1.0), ex(&[0.0, 1.0], -1.0)];
        let mut changed = data.clone();
        changed[1] = ex(&[0.5, 0.5], 1.0);
        let j = joint_divergence_trace(&problem, &data, &changed, &[0.1, 0.1], &[0.0, 0.0]).unwrap();
        let mut buf = Vec::new();
        j.trace_changed.write_csv(&mut buf, Some(&j.deltas)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,eta_t,example_index,theta_0,theta_1,delta_t");
        assert!(lines[1].ends_with(",0"));
        assert!(lines[3].ends_with(&format!(",{}", j.deltas[2])));
    }
}
