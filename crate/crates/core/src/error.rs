use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected} values, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("value {value} outside the potential domain (-1, 1)")]
    DomainViolation { value: f64 },

    #[error("Newton did not converge at step {step}: residual {residual:e} after {iterations} iterations")]
    NewtonDivergence {
        step: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("line search failed at iteration {iteration}: no decrease for step >= 1e-12")]
    LineSearchFailure { iteration: usize },

    #[error("singular matrix: zero pivot in column {column}")]
    SingularMatrix { column: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("rejected configuration: {0}")]
    RejectedConfiguration(String),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag used by the command-line runner.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::DomainViolation { .. } => "DomainViolation",
            Error::NewtonDivergence { .. } => "NewtonDivergence",
            Error::LineSearchFailure { .. } => "LineSearchFailure",
            Error::SingularMatrix { .. } => "SingularMatrix",
            Error::InvalidParameter { .. } => "InvalidParameter",
            Error::RejectedConfiguration(_) => "RejectedConfiguration",
        }
    }
}
