use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("design matrix is rank deficient or has k >= n: {0}")]
    RankDeficient(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric (asymmetry {asymmetry:e} exceeds tolerance)")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("support of {points} points exceeds the enumeration cap of {cap}")]
    SupportTooLarge { points: u128, cap: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid moment model: {0}")]
    InvalidModel(String),

    #[error("constraint `{constraint}` violated by H[{index}] (residual {residual:e})")]
    ConstraintViolated {
        constraint: &'static str,
        index: usize,
        residual: f64,
    },

    #[error("variance of the quadratic part needs fourth moments, which the model does not carry")]
    FourthMomentsUnavailable,

    #[error("design with row {row} deleted does not have full column rank")]
    LeaveOneOutRankDeficient { row: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
