use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("dimension {d} exceeds the enumeration limit of {limit}")]
    EnumerationLimit { d: usize, limit: usize },

    #[error("state {state} has zero mass at forward time {time}")]
    UnreachableState { state: String, time: f64 },

    #[error("invalid score at coordinate {coord}: 1 - s = {value}")]
    InvalidScore { coord: usize, value: f64 },

    #[error("assumption violated: state {state} has zero mass")]
    ZeroMass { state: String },

    #[error("model parameters are not finite (index {index})")]
    ModelCorrupt { index: usize },

    #[error("training error: {0}")]
    Training(String),

    #[error("sampler error at t = {time}: {reason}")]
    Sampler { time: f64, reason: String },

    #[error("planning error: {0}")]
    Planning(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint dimension mismatch: model has d = {model}, metadata has d = {meta}")]
    CheckpointDimension { model: usize, meta: usize },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
