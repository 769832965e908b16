//! CLI error type and exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("bound violation detected: {0}")]
    BoundViolation(String),

    #[error("missing stage output: {0}")]
    MissingStage(String),

    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// Exit codes: 0 success, 2 config error, 3 infeasibility,
    /// 4 bound violation, 5 internal error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::MissingStage(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::BoundViolation(_) => 4,
            CliError::Internal(_) => 5,
        }
    }
}

impl From<recourse_core::Error> for CliError {
    fn from(e: recourse_core::Error) -> Self {
        use recourse_core::Error as E;
        match e {
            E::Infeasible(m) => CliError::Infeasible(m),
            E::Internal(m) => CliError::Internal(m),
            E::Config(m) => CliError::Config(m),
            E::InvalidInput(m) => CliError::Config(m),
            E::PerturbationSpec(m) => CliError::Config(m),
            E::AbsoluteContinuity(m) => CliError::Config(m),
            E::DimensionMismatch { expected, got } => {
                CliError::Config(format!("dimension mismatch: expected {expected}, got {got}"))
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(format!("io error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Internal(format!("json error: {e}"))
    }
}
