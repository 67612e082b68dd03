use std::path::PathBuf;

/// Errors produced anywhere in the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate batch: batch statistics need at least 2 rows, got {0}")]
    DegenerateBatch(usize),

    #[error("unsupported loss: {0}")]
    UnsupportedLoss(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid distribution: row {row} sums to {sum}")]
    InvalidDistribution { row: usize, sum: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error in {path}: field `{field}`: {reason}")]
    Ingest {
        path: PathBuf,
        field: &'static str,
        reason: String,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("surrogate not ready: {0} broadcast(s) observed, need 2")]
    SurrogateNotReady(usize),

    #[error("attacker data error: {0}")]
    AttackerData(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for the CLI: 2 for configuration problems, 3 for
    /// numeric failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Ingest { .. } | Error::InsufficientData(_) => 2,
            Error::Numeric(_) | Error::InvalidDistribution { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
