use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's preconditions.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A tensor failed validation (range, finiteness, or shape).
    #[error("validation failed: {0}")]
    Validation(String),

    /// Tensor shapes are inconsistent for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Dataset ingestion failed for a specific file or directory.
    #[error("ingestion error: {0}")]
    Ingest(String),

    /// A configuration file or key is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint directory is missing, corrupt, or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training diverged or produced non-finite values.
    #[error("training error: {0}")]
    Training(String),

    /// An evaluation-stage computation failed.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Numerical routine failed to produce a usable result.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
