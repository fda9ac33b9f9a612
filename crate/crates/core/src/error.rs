use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum VarsmaError {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error(
        "regressor Gram matrix is singular or ill-conditioned (condition number {condition:.3e})"
    )]
    Collinear { condition: f64 },

    #[error("degenerate fit: residual covariance has nonpositive determinant")]
    DegenerateFit,

    #[error("AR polynomial is not stationary (companion spectral radius {spectral_radius:.6})")]
    NonStationary { spectral_radius: f64 },

    #[error("internal numerical error: {0}")]
    Numerical(String),

    #[error("all {} optimizer starts failed: {}", statuses.len(), statuses.join("; "))]
    FitFailed { statuses: Vec<String> },
}

pub type Result<T> = std::result::Result<T, VarsmaError>;
