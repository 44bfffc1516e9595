use thiserror::Error;

/// Errors raised anywhere in the training, storage and inference pipeline.
#[derive(Debug, Error)]
pub enum DressError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric fault in layer {layer}: {detail}")]
    Numeric { layer: usize, detail: String },

    #[error("stale cache: forward ran at parameter version {cached}, parameters are now at {current}")]
    StaleCache { cached: u64, current: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("level {level} out of range 1..={levels}")]
    LevelOutOfRange { level: usize, levels: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl DressError {
    pub fn shape(msg: impl Into<String>) -> Self {
        DressError::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        DressError::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        DressError::Format(msg.into())
    }

    pub fn invariant(msg: impl Into<String>) -> Self {
        DressError::Invariant(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, DressError>;
