use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("unsupported model: {0}")]
    UnsupportedModel(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed file: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("integrity failure: {0}")]
    Integrity(String),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

macro_rules! invalid_arg {
    ($($arg:tt)*) => { $crate::error::Error::InvalidArgument(format!($($arg)*)) };
}
pub(crate) use invalid_arg;
