use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors shared across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("tile specs do not partition the video: {0}")]
    Partition(String),

    #[error("patch index {index} out of vocabulary of size {vocab}")]
    VocabIndex { index: u32, vocab: u32 },

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("checkpoint version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("rollout is stale: log-prob drift {max_delta} exceeds 1e-5")]
    Stale { max_delta: f64 },

    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
