use std::io;
use std::path::PathBuf;

/// Failures of the IO layer. Core errors pass through unchanged.
#[derive(Debug, thiserror::Error)]
pub enum IrkError {
    // The cause is part of the message rather than a `source`, so that
    // chained printing does not repeat it.
    #[error("{path}: {err}")]
    Io { path: PathBuf, err: io::Error },
    #[error("{path}: {err}")]
    Json { path: PathBuf, err: serde_json::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] irk_core::Error),
}

pub type Result<T, E = IrkError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> IrkError {
    let path = path.into();
    move |err| IrkError::Io { path, err }
}

pub(crate) fn json_err(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> IrkError {
    let path = path.into();
    move |err| IrkError::Json { path, err }
}

pub(crate) fn format_err(path: impl Into<PathBuf>, msg: impl Into<String>) -> IrkError {
    IrkError::Format {
        path: path.into(),
        msg: msg.into(),
    }
}
