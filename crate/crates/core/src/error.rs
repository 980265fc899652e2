use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid k: {k} exceeds identity count {identities}")]
    InvalidK { k: usize, identities: usize },

    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(&'static str),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used by the command-line front end to pick an exit code.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::InvalidK { .. } => ErrorCategory::Config,
            Error::NonFinite(_) => ErrorCategory::Numeric,
            Error::InvalidInput(_)
            | Error::Shape(_)
            | Error::InvalidCorpus(_)
            | Error::Data(_)
            | Error::UndefinedSimilarity(_)
            | Error::Checkpoint(_)
            | Error::VersionMismatch { .. }
            | Error::Io { .. }
            | Error::Image(_)
            | Error::Wav(_) => ErrorCategory::Data,
            Error::Tensor(_) => ErrorCategory::Numeric,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
}
