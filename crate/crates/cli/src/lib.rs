//! Experiment orchestration for counterfactual robustness measurement:
//! config parsing, the staged pipeline, figure exports, and the built-in
//! selftest. The `recourse` binary is a thin wrapper over this library.

pub mod config;
pub mod error;
pub mod figures;
pub mod pipeline;
pub mod selftest;

pub use error::{CliError, Result};
