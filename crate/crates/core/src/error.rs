use thiserror::Error;

/// Errors raised across the diagnosis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("width mismatch: expected {expected}, found {found}")]
    WidthMismatch { expected: usize, found: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("Base absent")]
    MissingBase,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("zero-variance tail")]
    ZeroVarianceTail,

    #[error("weibull fit did not converge after {iterations} iterations (shape {shape}, scale {scale})")]
    NoConvergence {
        iterations: usize,
        shape: f64,
        scale: f64,
    },

    #[error("class {class} has {found} samples, needs at least {needed}")]
    TooFewSamples {
        class: usize,
        found: usize,
        needed: usize,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("missing prediction for strategy {0}")]
    MissingPrediction(String),

    #[error("invalid cohort spec: {0}")]
    InvalidSpec(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("malformed parameter container: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
