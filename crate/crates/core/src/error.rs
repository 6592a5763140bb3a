use thiserror::Error;

/// Errors raised by the numerical routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("parameter out of range: {0}")]
    ParameterRange(String),

    #[error("matrix is not positive definite (smallest eigenvalue {0:e})")]
    NotPositiveDefinite(f64),

    #[error("matrix is not symmetric (relative defect {0:e})")]
    Asymmetric(f64),

    #[error("trace {trace} differs from the normalized value {expected}")]
    TraceMismatch { trace: f64, expected: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("block is numerically singular (smallest eigenvalue {0:e})")]
    SingularBlock(f64),

    #[error("fixed-point solver failed: {0}")]
    NonConvergence(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("degenerate denominator {0:e} (interpolation threshold)")]
    DegenerateDenominator(f64),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("quadrature unstable: {0}")]
    QuadratureInstability(String),

    #[error("first Hermite coefficient of the activation is zero")]
    ZeroMu1,

    #[error("activation is not odd (relative defect {0:e})")]
    NotOdd(f64),

    #[error("serialization: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures of the numerics on otherwise valid input, as opposed
    /// to rejected parameters or malformed models.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence(_)
                | Error::DegenerateDenominator(_)
                | Error::Singular(_)
                | Error::SingularBlock(_)
                | Error::QuadratureInstability(_)
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
