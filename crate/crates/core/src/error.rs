use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported derivative order {order} (at most {max} per argument pair)")]
    UnsupportedDerivative { order: usize, max: usize },

    #[error("matrix is not positive definite: pivot {pivot} is {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("size mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },

    #[error("no sign change of the mass defect on [{lo}, {hi}]: potential too small for unit mass")]
    Infeasible { lo: f64, hi: f64 },

    #[error("Gauss-Newton step {iteration} failed: {reason}")]
    Solver { iteration: usize, reason: String },

    #[error("non-finite objective at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for failures of the optimizer itself rather than of the inputs.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::Solver { .. } | Error::NonFinite { .. } | Error::NotPositiveDefinite { .. }
        )
    }
}
