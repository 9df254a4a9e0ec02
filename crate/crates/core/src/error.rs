use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown measurement time {0}")]
    UnknownMeasurementTime(f64),
    #[error("invalid pruning candidate {index}: {reason}")]
    InvalidCandidate { index: usize, reason: String },
    #[error("incompatible variable labels: {0}")]
    Labels(String),
    #[error("non-finite cost at the initial point")]
    InvalidStart,
    #[error("ingest error on line {line}: {message}")]
    Ingest { line: usize, message: String },
    #[error("non-finite state at t = {0}")]
    NonFinite(f64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
