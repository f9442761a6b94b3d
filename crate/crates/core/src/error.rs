use thiserror::Error;

pub type Result<T> = std::result::Result<T, VccError>;

#[derive(Debug, Error)]
pub enum VccError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("layer index {index} out of range (model has {len} layers)")]
    Index { index: usize, len: usize },

    #[error("layer ordering violated: from {from} must precede to {to}")]
    Ordering { from: usize, to: usize },

    #[error("unsupported layer at index {index}: {kind}")]
    UnsupportedLayer { index: usize, kind: String },

    #[error("invalid upsampling target: {0}")]
    InvalidTarget(String),

    #[error("invalid k = {k} for {n} points")]
    InvalidK { k: usize, n: usize },

    #[error("zero-margin concept classifier: {0}")]
    ZeroMargin(String),

    #[error("insufficient random images: need {needed}, pool has {available}")]
    InsufficientRandoms { needed: usize, available: usize },

    #[error("no path from concept {0} to the class node")]
    NoPath(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid concept: {0}")]
    InvalidConcept(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("training failed: {message} (accuracy {accuracy:.4} after {epochs} epochs)")]
    TrainingFailure {
        message: String,
        accuracy: f64,
        epochs: usize,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric validation failed: {0}")]
    NumericValidation(String),

    #[error("bridge error: {0}")]
    Bridge(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl VccError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            VccError::Config(_) => 2,
            VccError::NumericValidation(_) => 3,
            VccError::Bridge(_) => 4,
            _ => 1,
        }
    }

    /// Short machine-readable category name.
    pub fn kind(&self) -> &'static str {
        match self {
            VccError::InvalidInput(_) => "invalid_input",
            VccError::Index { .. } => "index",
            VccError::Ordering { .. } => "ordering",
            VccError::UnsupportedLayer { .. } => "unsupported_layer",
            VccError::InvalidTarget(_) => "invalid_target",
            VccError::InvalidK { .. } => "invalid_k",
            VccError::ZeroMargin(_) => "zero_margin",
            VccError::InsufficientRandoms { .. } => "insufficient_randoms",
            VccError::NoPath(_) => "no_path",
            VccError::InsufficientData(_) => "insufficient_data",
            VccError::InvalidConcept(_) => "invalid_concept",
            VccError::UndefinedMetric(_) => "undefined_metric",
            VccError::TrainingFailure { .. } => "training_failure",
            VccError::NonFinite(_) => "non_finite",
            VccError::Config(_) => "config",
            VccError::NumericValidation(_) => "numeric_validation",
            VccError::Bridge(_) => "bridge",
            VccError::Format(_) => "format",
            VccError::Io(_) => "io",
            VccError::Json(_) => "json",
        }
    }
}
