//! Predictors over feature space: the linear-sigmoid model, tabulated grid
//! models, clamped affine wrappers, and Lipschitz-constant computation.
//!
//! Every model maps `R^d -> [0,1]` and is immutable after construction, so
//! instances can be shared freely across workers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use rand::Rng;

/// Classification decisions are taken as `predict(x) > 0.5` throughout.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// A point in feature space. Coordinates are finite and `d >= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("feature vector must have dimension >= 1"));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("feature vector coordinates must be finite"));
        }
        Ok(FeatureVector(coords))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for FeatureVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        FeatureVector::new(v)
    }
}

impl From<FeatureVector> for Vec<f64> {
    fn from(v: FeatureVector) -> Vec<f64> {
        v.0
    }
}

impl std::ops::Deref for FeatureVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Euclidean norm.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// Euclidean distance.
pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Project `v` onto the closed l2 ball of the given radius.
pub fn project_to_ball(v: &[f64], radius: f64) -> Vec<f64> {
    let norm = l2_norm(v);
    if norm <= radius || norm == 0.0 {
        v.to_vec()
    } else {
        let s = radius / norm;
        v.iter().map(|c| c * s).collect()
    }
}

/// Numerically stable logistic function; never returns NaN for finite input.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// A scalar predictor with outputs in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    kind: ModelKind,
    /// Declared Lipschitz bound; when absent the closed-form bound of the
    /// kind is used.
    lipschitz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    /// `sigmoid(w . x + b)`.
    LinearSigmoid { weights: Vec<f64>, bias: f64 },
    /// Multilinear interpolation of values on a regular grid over a box;
    /// coordinates are clamped to the box, so the model is defined on all
    /// of `R^d`.
    Tabulated(TabulatedGrid),
    /// `clamp(scale * base(x) + offset, 0, 1)`.
    Wrapped {
        base: Box<Model>,
        scale: f64,
        offset: f64,
    },
}

/// Grid data for tabulated models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabulatedGrid {
    lo: Vec<f64>,
    hi: Vec<f64>,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl TabulatedGrid {
    /// `values` is flattened row-major over `shape`; all entries in `[0,1]`.
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let d = lo.len();
        if d == 0 || hi.len() != d || shape.len() != d {
            return Err(Error::config("tabulated grid: inconsistent dimensions"));
        }
        for i in 0..d {
            if !(lo[i].is_finite() && hi[i].is_finite() && lo[i] <= hi[i]) {
                return Err(Error::config("tabulated grid: invalid box bounds"));
            }
            if shape[i] == 0 {
                return Err(Error::config("tabulated grid: empty axis"));
            }
            if shape[i] > 1 && lo[i] == hi[i] {
                return Err(Error::config("tabulated grid: degenerate axis with >1 points"));
            }
        }
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::config(format!(
                "tabulated grid: expected {} values, got {}",
                expected,
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config("tabulated grid: values must lie in [0,1]"));
        }
        Ok(TabulatedGrid { lo, hi, shape, values })
    }

    /// Tabulate `f` on a regular grid.
    pub fn from_fn(
        lo: Vec<f64>,
        hi: Vec<f64>,
        shape: Vec<usize>,
        mut f: impl FnMut(&[f64]) -> f64,
    ) -> Result<Self> {
        let d = lo.len();
        let total: usize = shape.iter().product();
        let mut values = Vec::with_capacity(total);
        let mut idx = vec![0usize; d];
        let mut point = vec![0.0f64; d];
        for _ in 0..total {
            for a in 0..d {
                point[a] = if shape[a] == 1 {
                    lo[a]
                } else {
                    lo[a] + (hi[a] - lo[a]) * idx[a] as f64 / (shape[a] - 1) as f64
                };
            }
            values.push(f(&point).clamp(0.0, 1.0));
            // advance row-major index (last axis fastest)
            for a in (0..d).rev() {
                idx[a] += 1;
                if idx[a] < shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        TabulatedGrid::new(lo, hi, shape, values)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn bounds(&self) -> (&[f64], &[f64]) {
        (&self.lo, &self.hi)
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        let mut flat = 0usize;
        for (a, &i) in idx.iter().enumerate() {
            flat = flat * self.shape[a] + i;
        }
        flat
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        // Per-axis cell index and interpolation fraction, with clamping.
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0f64; d];
        for a in 0..d {
            if self.shape[a] == 1 {
                continue;
            }
            let t = (x[a].clamp(self.lo[a], self.hi[a]) - self.lo[a]) / (self.hi[a] - self.lo[a]);
            let u = t * (self.shape[a] - 1) as f64;
            let i = (u.floor() as usize).min(self.shape[a] - 2);
            base[a] = i;
            frac[a] = u - i as f64;
        }
        // Multilinear combination over the 2^d cell corners.
        let corners = 1usize << d;
        let mut acc = 0.0;
        let mut idx = vec![0usize; d];
        for corner in 0..corners {
            let mut w = 1.0;
            for a in 0..d {
                let hi_side = (corner >> a) & 1 == 1;
                if self.shape[a] == 1 {
                    if hi_side {
                        w = 0.0;
                        break;
                    }
                    idx[a] = 0;
                    continue;
                }
                idx[a] = base[a] + usize::from(hi_side);
                w *= if hi_side { frac[a] } else { 1.0 - frac[a] };
            }
            if w != 0.0 {
                acc += w * self.values[self.flat_index(&idx)];
            }
        }
        acc
    }

    /// Certified Lipschitz upper bound: per cell, the gradient component
    /// along each axis is bounded by the steepest edge of the cell along
    /// that axis; combine axes by the Euclidean norm and take the max cell.
    fn lipschitz_upper_bound(&self) -> f64 {
        let d = self.dim();
        let cells: Vec<usize> = self.shape.iter().map(|&s| s.saturating_sub(1).max(1)).collect();
        let total_cells: usize = cells.iter().product();
        let mut worst: f64 = 0.0;
        let mut cell = vec![0usize; d];
        for _ in 0..total_cells {
            let mut sq = 0.0;
            for a in 0..d {
                if self.shape[a] == 1 {
                    continue;
                }
                let step = (self.hi[a] - self.lo[a]) / (self.shape[a] - 1) as f64;
                // max |delta value| over corner pairs differing only in axis a
                let others = 1usize << d;
                let mut max_slope: f64 = 0.0;
                let mut idx = vec![0usize; d];
                for corner in 0..others {
                    if (corner >> a) & 1 == 1 {
                        continue;
                    }
                    let mut ok = true;
                    for b in 0..d {
                        let side = (corner >> b) & 1;
                        if self.shape[b] == 1 {
                            if side == 1 {
                                ok = false;
                                break;
                            }
                            idx[b] = 0;
                        } else {
                            idx[b] = cell[b] + side;
                        }
                    }
                    if !ok {
                        continue;
                    }
                    let v0 = self.values[self.flat_index(&idx)];
                    idx[a] += 1;
                    let v1 = self.values[self.flat_index(&idx)];
                    idx[a] -= 1;
                    max_slope = max_slope.max(((v1 - v0) / step).abs());
                }
                sq += max_slope * max_slope;
            }
            worst = worst.max(sq.sqrt());
            for a in (0..d).rev() {
                cell[a] += 1;
                if cell[a] < cells[a] {
                    break;
                }
                cell[a] = 0;
            }
        }
        worst
    }
}

/// How a Lipschitz constant was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum LipschitzEstimate {
    /// Closed-form supremum (linear-sigmoid).
    Exact(f64),
    /// Certified upper bound derived from the model structure.
    UpperBound(f64),
    /// Sampled lower-bound estimate; the true constant may be larger.
    LowerBound(f64),
}

impl LipschitzEstimate {
    pub fn value(&self) -> f64 {
        match *self {
            LipschitzEstimate::Exact(v)
            | LipschitzEstimate::UpperBound(v)
            | LipschitzEstimate::LowerBound(v) => v,
        }
    }

    /// True when the value is only a sampled estimate.
    pub fn is_estimate(&self) -> bool {
        matches!(self, LipschitzEstimate::LowerBound(_))
    }
}

impl Model {
    pub fn linear_sigmoid(weights: Vec<f64>, bias: f64) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::config("linear-sigmoid model needs at least one weight"));
        }
        if weights.iter().any(|w| !w.is_finite()) || !bias.is_finite() {
            return Err(Error::config("linear-sigmoid parameters must be finite"));
        }
        Ok(Model {
            kind: ModelKind::LinearSigmoid { weights, bias },
            lipschitz: None,
        })
    }

    pub fn tabulated(grid: TabulatedGrid) -> Self {
        Model {
            kind: ModelKind::Tabulated(grid),
            lipschitz: None,
        }
    }

    /// Constant model `x -> value`.
    pub fn constant(dim: usize, value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::config("constant model value must lie in [0,1]"));
        }
        let grid = TabulatedGrid::new(vec![0.0; dim], vec![0.0; dim], vec![1; dim], vec![value])?;
        Ok(Model::tabulated(grid))
    }

    /// `clamp(scale * base(x) + offset, 0, 1)`.
    pub fn wrapped(base: Model, scale: f64, offset: f64) -> Result<Self> {
        if !scale.is_finite() || !offset.is_finite() {
            return Err(Error::config("wrapped model parameters must be finite"));
        }
        Ok(Model {
            kind: ModelKind::Wrapped {
                base: Box::new(base),
                scale,
                offset,
            },
            lipschitz: None,
        })
    }

    /// Attach a declared Lipschitz constant (used when loading models whose
    /// constant was estimated elsewhere).
    pub fn with_declared_lipschitz(mut self, gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::config("declared Lipschitz constant must be >= 0"));
        }
        self.lipschitz = Some(gamma);
        Ok(self)
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            ModelKind::LinearSigmoid { weights, .. } => weights.len(),
            ModelKind::Tabulated(g) => g.dim(),
            ModelKind::Wrapped { base, .. } => base.dim(),
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

    /// Model output in `[0,1]`.
    pub fn predict(&self, x: &FeatureVector) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.eval(x.coords()))
    }

    fn eval(&self, x: &[f64]) -> f64 {
        match &self.kind {
            ModelKind::LinearSigmoid { weights, bias } => sigmoid(dot(weights, x) + bias),
            ModelKind::Tabulated(g) => g.eval(x),
            ModelKind::Wrapped { base, scale, offset } => {
                (scale * base.eval(x) + offset).clamp(0.0, 1.0)
            }
        }
    }

    /// Pre-sigmoid value `w . x + b`; `None` for models without a margin.
    pub fn margin(&self, x: &FeatureVector) -> Result<Option<f64>> {
        self.check_dim(x)?;
        Ok(match &self.kind {
            ModelKind::LinearSigmoid { weights, bias } => Some(dot(weights, x) + bias),
            _ => None,
        })
    }

    /// Whether the clamp of a wrapped model is active at `x` (always false
    /// for other kinds). Mean-zero tests exclude clamping regions.
    pub fn clamps_at(&self, x: &FeatureVector) -> Result<bool> {
        self.check_dim(x)?;
        Ok(self.clamps_at_inner(x.coords()))
    }

    fn clamps_at_inner(&self, x: &[f64]) -> bool {
        match &self.kind {
            ModelKind::Wrapped { base, scale, offset } => {
                let raw = scale * base.eval(x) + offset;
                !(0.0..=1.0).contains(&raw) || base.clamps_at_inner(x)
            }
            _ => false,
        }
    }

    /// The box this model is naturally defined over, when it has one.
    pub fn natural_domain(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match &self.kind {
            ModelKind::Tabulated(g) => {
                let (lo, hi) = g.bounds();
                Some((lo.to_vec(), hi.to_vec()))
            }
            ModelKind::Wrapped { base, .. } => base.natural_domain(),
            ModelKind::LinearSigmoid { .. } => None,
        }
    }

    /// A valid Lipschitz upper bound for this model (declared constant if
    /// set, closed-form bound of the kind otherwise).
    pub fn lipschitz_bound(&self) -> f64 {
        if let Some(g) = self.lipschitz {
            return g;
        }
        match &self.kind {
            ModelKind::LinearSigmoid { weights, .. } => l2_norm(weights) / 4.0,
            ModelKind::Tabulated(g) => g.lipschitz_upper_bound(),
            ModelKind::Wrapped { base, scale, .. } => scale.abs() * base.lipschitz_bound(),
        }
    }

    /// Lipschitz constant of the model: exact for linear-sigmoid, a
    /// certified structural bound for the other kinds.
    pub fn lipschitz_constant(&self) -> LipschitzEstimate {
        match &self.kind {
            ModelKind::LinearSigmoid { weights, .. } => {
                LipschitzEstimate::Exact(l2_norm(weights) / 4.0)
            }
            _ => LipschitzEstimate::UpperBound(self.lipschitz_bound()),
        }
    }

    /// Sampled lower-bound estimate of the Lipschitz constant over the
    /// model's natural domain. Fails when the model has no domain attached.
    pub fn empirical_lipschitz(&self, n_pairs: usize, seed: u64) -> Result<LipschitzEstimate> {
        let (lo, hi) = self
            .natural_domain()
            .ok_or_else(|| Error::config("no sampling domain available for empirical Lipschitz estimation"))?;
        self.empirical_lipschitz_on(&lo, &hi, n_pairs, seed)
    }

    /// Sampled lower-bound estimate over an explicit box. Uses independent
    /// pairs plus perturbed near-pairs (distance 1e-3) to capture local
    /// slope.
    pub fn empirical_lipschitz_on(
        &self,
        lo: &[f64],
        hi: &[f64],
        n_pairs: usize,
        seed: u64,
    ) -> Result<LipschitzEstimate> {
        let d = self.dim();
        if lo.len() != d || hi.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: lo.len() });
        }
        if n_pairs == 0 {
            return Err(Error::invalid("empirical Lipschitz estimation needs n_pairs >= 1"));
        }
        let mut rng = rng_from_seed(seed);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..d)
                .map(|a| lo[a] + (hi[a] - lo[a]) * rng.gen::<f64>())
                .collect()
        };
        let mut best: f64 = 0.0;
        for _ in 0..n_pairs {
            let x = draw(&mut rng);
            let y = draw(&mut rng);
            let dist = l2_distance(&x, &y);
            if dist > 1e-12 {
                best = best.max((self.eval(&x) - self.eval(&y)).abs() / dist);
            }
            // near-pair around x
            let mut z = x.clone();
            let axis = rng.gen_range(0..d);
            let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            z[axis] += side * 1e-3;
            let dist = l2_distance(&x, &z);
            if dist > 0.0 {
                best = best.max((self.eval(&x) - self.eval(&z)).abs() / dist);
            }
        }
        Ok(LipschitzEstimate::LowerBound(best))
    }
}

/// Uniform Lipschitz bound over a collection of models.
pub fn ensemble_lipschitz<'a, I>(models: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a Model>,
{
    let mut best: Option<f64> = None;
    for m in models {
        let g = m.lipschitz_bound();
        best = Some(best.map_or(g, |b: f64| b.max(g)));
    }
    best.ok_or_else(|| Error::invalid("ensemble_lipschitz needs at least one model"))
}

// --- Serialization ---
// Models round-trip through a tagged JSON form; floats use the shortest
// representation that parses back to the identical bits.

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum ModelJson {
    LinearSigmoid {
        dim: usize,
        theta: Vec<f64>,
        bias: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        lipschitz: Option<f64>,
    },
    Tabulated {
        dim: usize,
        lo: Vec<f64>,
        hi: Vec<f64>,
        shape: Vec<usize>,
        values: Vec<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        lipschitz: Option<f64>,
    },
    Wrapped {
        base: Box<ModelJson>,
        scale: f64,
        offset: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        lipschitz: Option<f64>,
    },
}

impl From<&Model> for ModelJson {
    fn from(m: &Model) -> Self {
        match &m.kind {
            ModelKind::LinearSigmoid { weights, bias } => ModelJson::LinearSigmoid {
                dim: weights.len(),
                theta: weights.clone(),
                bias: *bias,
                lipschitz: m.lipschitz,
            },
            ModelKind::Tabulated(g) => ModelJson::Tabulated {
                dim: g.dim(),
                lo: g.lo.clone(),
                hi: g.hi.clone(),
                shape: g.shape.clone(),
                values: g.values.clone(),
                lipschitz: m.lipschitz,
            },
            ModelKind::Wrapped { base, scale, offset } => ModelJson::Wrapped {
                base: Box::new(ModelJson::from(base.as_ref())),
                scale: *scale,
                offset: *offset,
                lipschitz: m.lipschitz,
            },
        }
    }
}

impl TryFrom<ModelJson> for Model {
    type Error = Error;
    fn try_from(j: ModelJson) -> Result<Self> {
        let (model, lip) = match j {
            ModelJson::LinearSigmoid { dim, theta, bias, lipschitz } => {
                if theta.len() != dim {
                    return Err(Error::config("model json: dim does not match theta length"));
                }
                (Model::linear_sigmoid(theta, bias)?, lipschitz)
            }
            ModelJson::Tabulated { dim, lo, hi, shape, values, lipschitz } => {
                if lo.len() != dim {
                    return Err(Error::config("model json: dim does not match bounds"));
                }
                (Model::tabulated(TabulatedGrid::new(lo, hi, shape, values)?), lipschitz)
            }
            ModelJson::Wrapped { base, scale, offset, lipschitz } => {
                let base = Model::try_from(*base)?;
                (Model::wrapped(base, scale, offset)?, lipschitz)
            }
        };
        match lip {
            Some(g) => model.with_declared_lipschitz(g),
            None => Ok(model),
        }
    }
}

impl Serialize for Model {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ModelJson::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Model {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = ModelJson::deserialize(d)?;
        Model::try_from(j).map_err(serde::de::Error::custom)
    }
}
