use thiserror::Error;

/// Errors raised by the calculus, the structures and the estimators.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not symmetric (defect {defect:e}, tolerance {tolerance:e})")]
    NotSymmetric { defect: f64, tolerance: f64 },

    #[error("matrix is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e}, tolerance {tolerance:e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64, tolerance: f64 },

    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("missing generator for structure of kind {0}")]
    MissingGenerator(&'static str),

    #[error("singular matrix (condition number {condition:e})")]
    Singular { condition: f64 },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("mismatched provenance: {0}")]
    Provenance(String),

    #[error("derivative check failed: {0}")]
    DerivativeMismatch(String),

    #[error("estimation failure: {0}")]
    Estimation(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_dim(expected: usize, actual: usize, context: &'static str) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected,
            actual,
            context,
        })
    }
}
