use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SatError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SatError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SatError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SatError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        SatError::Format { path: path.into(), msg: msg.into() }
    }

    /// Process exit code for the CLI: 3 for numerical failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            SatError::Numerical(_) => 3,
            _ => 2,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::SatError::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
