use std::path::PathBuf;

/// Errors surfaced by the rendering pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor/image dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A parameter or configuration value is out of contract.
    #[error("config error: {0}")]
    Config(String),

    /// An operation was called outside its contract (e.g. non-scalar loss).
    #[error("contract error: {0}")]
    Contract(String),

    /// Numeric breakdown: NaN/Inf where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// File I/O failure, always carrying the offending path.
    #[error("i/o error on {path}: {msg}")]
    Io { path: PathBuf, msg: String },

    /// Malformed checkpoint, manifest or report file.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            msg: err.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
