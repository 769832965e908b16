//! Robustness measurement for counterfactual explanations under model
//! change.
//!
//! The crate provides:
//!
//! - [`models`]: Lipschitz predictors over feature space (linear-sigmoid,
//!   tabulated grids, clamped wrappers) and Lipschitz-constant computation.
//! - [`distributions`]: analytic-density distributions, the density-ratio
//!   norm `kappa`, and the L2 distance between models.
//! - [`training`]: sequential projected gradient descent on the bounded
//!   logistic problem, with expansivity/boundedness checkers and joint
//!   divergence traces for perturbed datasets.
//! - [`modelchange`]: ensembles of changed models (retraining, parameter
//!   ball, output noise) and their estimated change profiles.
//! - [`counterfactual`]: norm-induced and data-manifold counterfactual
//!   generation.
//! - [`stability`]: the local stability measure, its computable relaxation,
//!   and the robustness test.
//! - [`bounds`]: closed-form tail bounds and Monte Carlo verification of
//!   the corresponding event probabilities.
//!
//! Everything is deterministic given explicit seeds; derived seed streams
//! come from [`rng::derive_seed`].

pub mod bounds;
pub mod counterfactual;
pub mod distributions;
pub mod error;
pub mod modelchange;
pub mod models;
pub mod rng;
pub mod stability;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
