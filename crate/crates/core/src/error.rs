use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("label {label} out of range for {n_classes} classes")]
    InvalidLabel { label: usize, n_classes: usize },

    #[error("invalid probabilities{}: {reason}", record_suffix(.record))]
    InvalidProbabilities { record: Option<String>, reason: String },

    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),

    #[error("invalid threshold {0}")]
    InvalidThreshold(f64),

    #[error("score at position {index} is not finite")]
    InvalidScore { index: usize },

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("test set is empty")]
    EmptyTest,

    #[error("weights sum to zero")]
    DegenerateWeights,

    #[error("weight at position {index} is invalid ({value})")]
    InvalidWeight { index: usize, value: f64 },

    #[error("need at least {needed} points, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("k = {k} is invalid for {n} points")]
    InvalidK { k: usize, n: usize },

    #[error("record {id} is missing `{field}`")]
    IncompleteRecord { id: String, field: &'static str },

    #[error("training data must contain at least two classes")]
    DegenerateLabels,

    #[error("unsupported scenario: {0}")]
    UnsupportedScenario(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}:{line}: {message}", .path.display())]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn record_suffix(record: &Option<String>) -> String {
    match record {
        Some(id) => format!(" in record {id}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
