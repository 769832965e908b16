//! Counterfactual generation: the norm-induced counterfactual over all of
//! `R^d` (closed-form hyperplane projection where exact, penalized descent
//! plus bisection elsewhere) and the closest data-manifold counterfactual
//! (exhaustive scan over a candidate set).

use crate::error::{Error, Result};
use crate::models::{dot, l2_norm, FeatureVector, Model, ModelKind, DECISION_THRESHOLD};
use serde::{Deserialize, Serialize};

/// Cost norm for counterfactual search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
}

impl Norm {
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Norm::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Norm::L2 => crate::models::l2_distance(a, b),
        }
    }
}

/// A counterfactual request for a point currently classified negative.
#[derive(Debug, Clone)]
pub struct CounterfactualQuery {
    pub x: FeatureVector,
    pub norm: Norm,
    /// Require `m(xbar) >= 0.5 + margin_slack`; zero asks for the decision
    /// boundary itself.
    pub margin_slack: f64,
}

impl CounterfactualQuery {
    pub fn new(x: FeatureVector, norm: Norm, margin_slack: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&margin_slack) {
            return Err(Error::invalid("margin slack must lie in [0, 0.5)"));
        }
        Ok(CounterfactualQuery { x, norm, margin_slack })
    }

    fn threshold(&self) -> f64 {
        DECISION_THRESHOLD + self.margin_slack
    }
}

/// A found counterfactual.
#[derive(Debug, Clone, Serialize)]
pub struct CounterfactualResult {
    pub xbar: FeatureVector,
    pub cost: f64,
    pub valid: bool,
    pub iterations: usize,
    pub candidates_examined: usize,
}

/// Largest feasibility nudge applied after the closed-form projection. The
/// actual nudge is the smallest power-of-ten step that makes the point
/// valid, so the cost stays strictly within 1e-9 of the exact projection.
const MAX_NUDGE: f64 = 1e-9;
const MAX_LAMBDA: f64 = (1u64 << 33) as f64;
const DESCENT_ITERS: usize = 400;

/// Norm-induced counterfactual over `R^d`.
///
/// Linear-sigmoid models with the l2 norm use the exact hyperplane
/// projection. Every other case runs penalized descent (doubling the
/// feasibility weight until a valid point appears), for low-dimensional
/// models additionally sweeps a grid over the model's natural box, and
/// finally tightens the winner by bisection along the segment back to `x`.
pub fn find_counterfactual_free(model: &Model, q: &CounterfactualQuery) -> Result<CounterfactualResult> {
    let p = model.predict(&q.x)?;
    if p >= DECISION_THRESHOLD {
        return Err(Error::invalid(format!(
            "query point already classified positive (m(x) = {p})"
        )));
    }
    if let (ModelKind::LinearSigmoid { weights, bias }, Norm::L2) = (model.kind(), q.norm) {
        return closed_form_projection(model, q, weights, *bias);
    }
    let threshold = q.threshold();
    let valid = |pt: &[f64]| -> Result<bool> {
        Ok(model.predict(&FeatureVector::new(pt.to_vec())?)? >= threshold)
    };

    let mut iterations = 0usize;
    let mut best: Option<Vec<f64>> = None;
    if let Some(found) = penalized_descent(model, q, &mut iterations)? {
        best = Some(found);
    }
    let mut candidates_examined = 0usize;
    if model.dim() <= 3 && !matches!(model.kind(), ModelKind::LinearSigmoid { .. }) {
        if let Some(found) = grid_sweep(model, q, &mut candidates_examined)? {
            let better = match &best {
                Some(b) => q.norm.distance(&q.x, &found) < q.norm.distance(&q.x, b),
                None => true,
            };
            if better {
                best = Some(found);
            }
        }
    }
    let Some(found) = best else {
        return Err(Error::Infeasible(
            "no point reaching the decision threshold was found within the search budget".into(),
        ));
    };

    let tight = bisect_to_boundary(&q.x, &found, &valid)?;
    let xbar = FeatureVector::new(tight)?;
    let cost = q.norm.distance(&q.x, &xbar);
    Ok(CounterfactualResult {
        valid: model.predict(&xbar)? >= threshold,
        xbar,
        cost,
        iterations,
        candidates_examined,
    })
}

fn closed_form_projection(
    model: &Model,
    q: &CounterfactualQuery,
    weights: &[f64],
    bias: f64,
) -> Result<CounterfactualResult> {
    let wnorm2 = dot(weights, weights);
    if wnorm2 == 0.0 {
        return Err(Error::Infeasible("zero-weight model never crosses the threshold".into()));
    }
    // margin target for sigmoid(t) = threshold
    let s = q.margin_slack;
    let target = ((DECISION_THRESHOLD + s) / (DECISION_THRESHOLD - s)).ln();
    let margin = dot(weights, &q.x) + bias;
    let shift = (target - margin) / wnorm2;
    let wnorm = wnorm2.sqrt();
    let threshold = q.threshold();
    let base: Vec<f64> = q.x.iter().zip(weights).map(|(c, w)| c + shift * w).collect();
    // nudge onto the feasible side when rounding left the point short
    let mut xbar = FeatureVector::new(base.clone())?;
    let mut nudge = 1e-15;
    while model.predict(&xbar)? < threshold {
        let cand: Vec<f64> = base
            .iter()
            .zip(weights)
            .map(|(c, w)| c + nudge * w / wnorm)
            .collect();
        xbar = FeatureVector::new(cand)?;
        if nudge >= MAX_NUDGE {
            break;
        }
        nudge = (nudge * 10.0).min(MAX_NUDGE);
    }
    let cost = q.norm.distance(&q.x, &xbar);
    Ok(CounterfactualResult {
        valid: model.predict(&xbar)? >= threshold,
        xbar,
        cost,
        iterations: 0,
        candidates_examined: 0,
    })
}

/// Gradient of the model output, analytic for linear-sigmoid and central
/// finite differences otherwise.
fn model_gradient(model: &Model, pt: &[f64]) -> Result<Vec<f64>> {
    if let ModelKind::LinearSigmoid { weights, bias } = model.kind() {
        let t = dot(weights, pt) + bias;
        let s = crate::models::sigmoid(t);
        let ds = s * (1.0 - s);
        return Ok(weights.iter().map(|w| w * ds).collect());
    }
    let h = 1e-5;
    let mut g = Vec::with_capacity(pt.len());
    let mut probe = pt.to_vec();
    for a in 0..pt.len() {
        probe[a] = pt[a] + h;
        let fp = model.predict(&FeatureVector::new(probe.clone())?)?;
        probe[a] = pt[a] - h;
        let fm = model.predict(&FeatureVector::new(probe.clone())?)?;
        probe[a] = pt[a];
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(g)
}

/// Minimize `cost(x, xbar) + lambda * max(0, threshold - m(xbar))^2`,
/// doubling `lambda` from 1 until a valid point is reached. Returns the
/// first valid point encountered, or `None` when the budget runs out.
fn penalized_descent(
    model: &Model,
    q: &CounterfactualQuery,
    iterations: &mut usize,
) -> Result<Option<Vec<f64>>> {
    let threshold = q.threshold();
    let d = q.x.dim();
    let mut lambda = 1.0f64;
    let mut xbar = q.x.coords().to_vec();
    while lambda <= MAX_LAMBDA {
        let scale = 1.0f64.max(l2_norm(&q.x));
        let mut step = 0.1 * scale;
        for _ in 0..DESCENT_ITERS {
            *iterations += 1;
            let p = model.predict(&FeatureVector::new(xbar.clone())?)?;
            if p >= threshold {
                return Ok(Some(xbar));
            }
            let hinge = threshold - p;
            let g = model_gradient(model, &xbar)?;
            match q.norm {
                Norm::L2 => {
                    let mut dir = vec![0.0; d];
                    let mut norm = 0.0;
                    for a in 0..d {
                        dir[a] = 2.0 * (xbar[a] - q.x[a]) - lambda * 2.0 * hinge * g[a];
                        norm += dir[a] * dir[a];
                    }
                    let norm = norm.sqrt();
                    if norm < 1e-15 {
                        break; // flat; try a larger penalty weight
                    }
                    for a in 0..d {
                        xbar[a] -= step * dir[a] / norm;
                    }
                }
                Norm::L1 => {
                    // penalty gradient step, then shrink toward x
                    let mut norm = 0.0;
                    for gi in &g {
                        norm += lambda * 2.0 * hinge * gi * lambda * 2.0 * hinge * gi;
                    }
                    let norm = norm.sqrt();
                    if norm < 1e-15 {
                        break;
                    }
                    for a in 0..d {
                        let y = xbar[a] + step * lambda * 2.0 * hinge * g[a] / norm;
                        let v = y - q.x[a];
                        let shrunk = v.signum() * (v.abs() - step * 0.5).max(0.0);
                        xbar[a] = q.x[a] + shrunk;
                    }
                }
            }
            step *= 0.995;
        }
        lambda *= 2.0;
    }
    Ok(None)
}

/// Sweep a regular grid over the model's natural box (or a box around `x`)
/// and return the valid point closest to `x` in the query norm.
fn grid_sweep(
    model: &Model,
    q: &CounterfactualQuery,
    candidates_examined: &mut usize,
) -> Result<Option<Vec<f64>>> {
    let d = model.dim();
    let (lo, hi) = model.natural_domain().unwrap_or_else(|| {
        let r = 5.0 + l2_norm(&q.x);
        (
            q.x.iter().map(|c| c - r).collect(),
            q.x.iter().map(|c| c + r).collect(),
        )
    });
    let per_axis = match d {
        1 => 4097,
        2 => 201,
        _ => 61,
    };
    let threshold = q.threshold();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let total: usize = per_axis_total(per_axis, d);
    let mut idx = vec![0usize; d];
    let mut pt = vec![0.0f64; d];
    for _ in 0..total {
        for a in 0..d {
            pt[a] = lo[a] + (hi[a] - lo[a]) * idx[a] as f64 / (per_axis - 1) as f64;
        }
        *candidates_examined += 1;
        let p = model.predict(&FeatureVector::new(pt.clone())?)?;
        if p >= threshold {
            let dist = q.norm.distance(&q.x, &pt);
            if best.as_ref().is_none_or(|(b, _)| dist < *b) {
                best = Some((dist, pt.clone()));
            }
        }
        for a in (0..d).rev() {
            idx[a] += 1;
            if idx[a] < per_axis {
                break;
            }
            idx[a] = 0;
        }
    }
    Ok(best.map(|(_, p)| p))
}

fn per_axis_total(per_axis: usize, d: usize) -> usize {
    (0..d).fold(1usize, |acc, _| acc * per_axis)
}

/// Binary search along `[x, valid_point]` for the earliest valid point.
/// Maintains `hi` valid throughout, so the returned point is valid.
fn bisect_to_boundary(
    x: &FeatureVector,
    valid_point: &[f64],
    valid: &dyn Fn(&[f64]) -> Result<bool>,
) -> Result<Vec<f64>> {
    debug_assert!(valid(valid_point)?);
    let at = |t: f64| -> Vec<f64> {
        x.iter()
            .zip(valid_point)
            .map(|(a, b)| a + t * (b - a))
            .collect()
    };
    let mut lo = 0.0f64; // invalid end (the query point)
    let mut hi = 1.0f64; // valid end
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if valid(&at(mid))? {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(at(hi))
}

/// Closest data-manifold counterfactual: scan the candidate set for valid
/// points and return the closest; ties break toward the lowest index.
pub fn find_counterfactual_manifold(
    model: &Model,
    q: &CounterfactualQuery,
    manifold: &[FeatureVector],
) -> Result<CounterfactualResult> {
    if manifold.is_empty() {
        return Err(Error::invalid("manifold candidate set is empty"));
    }
    let p = model.predict(&q.x)?;
    if p >= DECISION_THRESHOLD {
        return Err(Error::invalid(format!(
            "query point already classified positive (m(x) = {p})"
        )));
    }
    let threshold = q.threshold();
    let mut best: Option<(f64, usize)> = None;
    for (i, cand) in manifold.iter().enumerate() {
        if model.predict(cand)? >= threshold {
            let dist = q.norm.distance(&q.x, cand);
            if best.is_none_or(|(b, _)| dist < b) {
                best = Some((dist, i));
            }
        }
    }
    match best {
        Some((cost, i)) => Ok(CounterfactualResult {
            xbar: manifold[i].clone(),
            cost,
            valid: true,
            iterations: 0,
            candidates_examined: manifold.len(),
        }),
        None => Err(Error::Infeasible(
            "no manifold candidate reaches the decision threshold".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::TabulatedGrid;

    fn fv(coords: &[f64]) -> FeatureVector {
        FeatureVector::new(coords.to_vec()).unwrap()
    }

    #[test]
    fn one_dim_boundary_projection() {
        let m = Model::linear_sigmoid(vec![1.0], 0.0).unwrap();
        let q = CounterfactualQuery::new(fv(&[-2.0]), Norm::L2, 0.0).unwrap();
        let r = find_counterfactual_free(&m, &q).unwrap();
        assert!(r.valid);
        assert!((r.xbar[0] - 0.0).abs() < 1e-8);
        assert!((r.cost - 2.0).abs() < 1e-8);
    }

    #[test]
    fn two_dim_projection_hits_origin() {
        let m = Model::linear_sigmoid(vec![1.0, 1.0], 0.0).unwrap();
        let q = CounterfactualQuery::new(fv(&[-1.0, -1.0]), Norm::L2, 0.0).unwrap();
        let r = find_counterfactual_free(&m, &q).unwrap();
        assert!(r.valid);
        assert!((r.xbar[0] - 0.0).abs() < 1e-8 && (r.xbar[1] - 0.0).abs() < 1e-8);
        assert!((r.cost - std::f64::consts::SQRT_2).abs() < 1e-8);
    }

    #[test]
    fn closed_form_cost_matches_margin_formula() {
        let m = Model::linear_sigmoid(vec![0.7, -1.3], 0.4).unwrap();
        let x = fv(&[-1.0, 1.2]);
        let q = CounterfactualQuery::new(x.clone(), Norm::L2, 0.0).unwrap();
        let r = find_counterfactual_free(&m, &q).unwrap();
        let margin = 0.7 * x[0] - 1.3 * x[1] + 0.4;
        let expected = margin.abs() / l2_norm(&[0.7, -1.3]);
        assert!((r.cost - expected).abs() < 1e-9, "{} vs {expected}", r.cost);
        assert!(r.valid);
    }

    #[test]
    fn margin_slack_moves_past_the_boundary() {
        let m = Model::linear_sigmoid(vec![2.0], 0.0).unwrap();
        let q = CounterfactualQuery::new(fv(&[-1.0]), Norm::L2, 0.3).unwrap();
        let r = find_counterfactual_free(&m, &q).unwrap();
        let p = m.predict(&r.xbar).unwrap();
        assert!(p >= 0.8, "p = {p}");
        assert!(p < 0.801);
    }

    #[test]
    fn already_valid_query_is_rejected() {
        let m = Model::linear_sigmoid(vec![1.0], 0.0).unwrap();
        let q = CounterfactualQuery::new(fv(&[1.0]), Norm::L2, 0.0).unwrap();
        assert!(matches!(find_counterfactual_free(&m, &q), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn infeasible_model_reports_infeasibility() {
        let m = Model::constant(2, 0.3).unwrap();
        let q = CounterfactualQuery::new(fv(&[0.2, 0.2]), Norm::L2, 0.0).unwrap();
        assert!(matches!(find_counterfactual_free(&m, &q), Err(Error::Infeasible(_))));
    }

    #[test]
    fn l1_search_on_linear_model_approaches_single_axis_move() {
        // with |w_1| > |w_0| the cheapest l1 move uses only axis 1
        let m = Model::linear_sigmoid(vec![0.5, 2.0], 0.0).unwrap();
        let x = fv(&[-0.5, -0.4]);
        let q = CounterfactualQuery::new(x.clone(), Norm::L1, 0.0).unwrap();
        let r = find_counterfactual_free(&m, &q).unwrap();
        assert!(r.valid);
        let margin: f64 = 0.5 * x[0] + 2.0 * x[1];
        let optimal = margin.abs() / 2.0;
        assert!(
            r.cost <= optimal + 0.05,
            "l1 cost {} far from optimal {optimal}",
            r.cost
        );
    }

    fn bump_model() -> Model {
        // radial bump centered at (0.4, 0.1) on [-1,1]^2
        let grid = TabulatedGrid::from_fn(
            vec![-1.0, -1.0],
            vec![1.0, 1.0],
            vec![81, 81],
            |p| {
                let dx = p[0] - 0.4;
                let dy = p[1] - 0.1;
                (-(dx * dx + dy * dy) / 0.08).exp()
            },
        )
        .unwrap();
        Model::tabulated(grid)
    }

    #[test]
    fn tabulated_toy_is_near_grid_oracle() {
        let m = bump_model();
        let x = fv(&[-0.6, -0.5]);
        assert!(m.predict(&x).unwrap() < 0.5);
        let q = CounterfactualQuery::new(x.clone(), Norm::L2, 0.0).unwrap();
        let r = find_counterfactual_free(&m, &q).unwrap();
        assert!(r.valid);

        // independent brute-force oracle at h = 0.01
        let h = 0.01;
        let mut oracle = f64::INFINITY;
        let steps = (2.0 / h) as usize + 1;
        for i in 0..steps {
            for j in 0..steps {
                let p = [-1.0 + i as f64 * h, -1.0 + j as f64 * h];
                if m.predict(&fv(&p)).unwrap() >= 0.5 {
                    oracle = oracle.min(Norm::L2.distance(&x, &p));
                }
            }
        }
        assert!(oracle.is_finite());
        assert!(
            r.cost <= oracle + h * std::f64::consts::SQRT_2,
            "cost {} oracle {oracle}",
            r.cost
        );
    }

    #[test]
    fn manifold_scan_examples() {
        let m = Model::linear_sigmoid(vec![1.0, 1.0], 0.0).unwrap();
        let x = fv(&[-1.0, 0.0]);
        let q = CounterfactualQuery::new(x.clone(), Norm::L2, 0.0).unwrap();

        // only the query point itself: infeasible
        let err = find_counterfactual_manifold(&m, &q, std::slice::from_ref(&x));
        assert!(matches!(err, Err(Error::Infeasible(_))));

        let manifold = vec![fv(&[0.0, 0.0]), fv(&[5.0, 5.0])];
        let r = find_counterfactual_manifold(&m, &q, &manifold).unwrap();
        assert_eq!(r.xbar, fv(&[0.0, 0.0]));
        assert!((r.cost - 1.0).abs() < 1e-15);
        assert_eq!(r.candidates_examined, 2);
    }

    #[test]
    fn manifold_tie_breaks_toward_lower_index() {
        let m = Model::linear_sigmoid(vec![1.0, 0.0], 0.0).unwrap();
        let q = CounterfactualQuery::new(fv(&[-1.0, 0.0]), Norm::L2, 0.0).unwrap();
        let manifold = vec![fv(&[1.0, 1.0]), fv(&[1.0, -1.0])];
        let r = find_counterfactual_manifold(&m, &q, &manifold).unwrap();
        assert_eq!(r.xbar, manifold[0]);
    }

    #[test]
    fn manifold_matches_independent_scan() {
        let m = bump_model();
        let pts: Vec<FeatureVector> = (0..40)
            .map(|i| {
                let a = i as f64 / 40.0 * std::f64::consts::TAU;
                fv(&[0.4 + 0.2 * a.cos(), 0.1 + 0.2 * a.sin()])
            })
            .collect();
        let x = fv(&[-0.8, -0.8]);
        let q = CounterfactualQuery::new(x.clone(), Norm::L2, 0.0).unwrap();
        let r = find_counterfactual_manifold(&m, &q, &pts).unwrap();

        // independent re-implementation of the scan
        let mut best: Option<(f64, usize)> = None;
        for (i, c) in pts.iter().enumerate() {
            if m.predict(c).unwrap() >= 0.5 {
                let d = Norm::L2.distance(&x, c);
                if best.is_none_or(|(b, _)| d < b) {
                    best = Some((d, i));
                }
            }
        }
        let (cost, idx) = best.unwrap();
        assert_eq!(r.xbar, pts[idx]);
        assert_eq!(r.cost, cost);
    }

    #[test]
    fn manifold_cost_dominates_free_cost() {
        let m = Model::linear_sigmoid(vec![1.0, 1.0], 0.0).unwrap();
        let x = fv(&[-1.0, -0.5]);
        let q = CounterfactualQuery::new(x.clone(), Norm::L2, 0.0).unwrap();
        let free = find_counterfactual_free(&m, &q).unwrap();
        let manifold = vec![fv(&[0.5, 0.5]), fv(&[2.0, 0.0]), fv(&[0.0, 2.0])];
        let constrained = find_counterfactual_manifold(&m, &q, &manifold).unwrap();
        assert!(constrained.cost >= free.cost - 1e-12);
    }

    #[test]
    fn rejects_bad_slack() {
        assert!(CounterfactualQuery::new(fv(&[0.0]), Norm::L2, 0.5).is_err());
        assert!(CounterfactualQuery::new(fv(&[0.0]), Norm::L2, -0.1).is_err());
    }
}
