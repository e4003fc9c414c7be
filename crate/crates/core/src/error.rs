use thiserror::Error;

/// Errors produced by the forecasting toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at row {row} after jitter {jitter:e})")]
    NotPositiveDefinite { row: usize, pivot: f64, jitter: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("invalid lengthscale {0}: lengthscales must be strictly positive")]
    InvalidLengthscale(f64),
    #[error("invalid kernel bank: {0}")]
    InvalidBank(String),
    #[error("mixture weights have length {got}, kernel bank has {expected} components")]
    WeightDimensionMismatch { expected: usize, got: usize },
    #[error("weights are not on the probability simplex: {0}")]
    InvalidSimplex(String),
    #[error("invalid correlation matrix: {0}")]
    InvalidCorrelation(String),
    #[error("standard deviation must be strictly positive, got {0}")]
    NonpositiveSigma(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("window must contain at least one step")]
    EmptyWindow,
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("series `{series}` has non-uniform spacing at row {index}")]
    NonUniformSpacing { series: String, index: usize },
    #[error("series `{series}` has duplicate timestamp {timestamp}")]
    DuplicateTimestamp { series: String, timestamp: String },
    #[error("unsupported sampling frequency: {0}")]
    UnsupportedGranularity(String),
    #[error("series `{0}` has an empty training split")]
    EmptyTrainSplit(String),
    #[error("series `{series}` too short: {have} steps available, {need} required")]
    SeriesTooShort { series: String, have: usize, need: usize },
    #[error("autoregressive coefficient must satisfy |phi| < 1, got {0}")]
    InvalidPhi(f64),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {loss}")]
    DivergedLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("history too short: {have} observations, {need} required")]
    HistoryTooShort { have: usize, need: usize },
    #[error("at least {need} samples required, got {have}")]
    TooFewSamples { have: usize, need: usize },
    #[error("normalizing denominator is zero")]
    ZeroDenominator,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
