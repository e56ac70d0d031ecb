use std::path::PathBuf;

/// Failure categories shared across the pipeline.
///
/// The variants line up with the CLI exit-code contract: usage and
/// configuration problems, data problems, and evaluation problems are kept
/// apart so callers can map them without string matching.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! usage_err {
    ($($arg:tt)*) => { $crate::error::Error::Usage(format!($($arg)*)) };
}
macro_rules! data_err {
    ($($arg:tt)*) => { $crate::error::Error::Data(format!($($arg)*)) };
}
pub(crate) use {config_err, data_err, dim_err, usage_err};
