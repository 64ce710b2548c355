use std::path::PathBuf;

/// Crate-wide error type. Variants map onto the failure classes the public
/// operations are allowed to produce: bad parameters, shape mismatches,
/// numerical blow-ups, configuration problems, and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {msg}")]
    Io { path: PathBuf, msg: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, msg: impl std::fmt::Display) -> Self {
        Error::Io { path: path.into(), msg: msg.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
