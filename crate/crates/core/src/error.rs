use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("group too small: need at least 2 rollouts, got {0}")]
    GroupTooSmall(usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("sequence too long: {len} tokens exceeds context window of {window}")]
    SequenceTooLong { len: usize, window: usize },

    #[error("incompatible snapshot: {0}")]
    IncompatibleSnapshot(String),

    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("non-finite gradient at step {step}: {detail}")]
    NonFiniteGradient { step: usize, detail: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("incomparable runs: {0}")]
    IncomparableRuns(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
