use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("csv parse error at line {line}: {msg}")]
    CsvParse { line: u64, msg: String },

    #[error("unknown schema kind: {0}")]
    UnknownSchema(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("vocab hash mismatch: checkpoint has {expected}, data yields {actual}")]
    VocabHashMismatch { expected: String, actual: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
