use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("potential is not strictly convex near x = {0}")]
    NotStrictlyConvex(f64),
    #[error("h vanishes or is negative at interior point {0}")]
    VanishingDiffusion(f64),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("model is not normalizable: {0}")]
    ModelNotNormalizable(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("degenerate measure: {0}")]
    DegenerateMeasure(String),
    #[error("no spectral gap detected (lambda1 = {0:e})")]
    NoGapDetected(f64),
    #[error("test function has zero variance")]
    ConstantTestFunction,
    #[error("direction lies in the constraint span after projection")]
    DegenerateDirection,
    #[error("invalid cdf: {0}")]
    InvalidCdf(String),
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
