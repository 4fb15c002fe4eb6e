use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SfeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SfeError {
    /// Invalid configuration or incompatible shapes supplied by the caller.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// NaN or infinity produced by a forward or backward step.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Missing or corrupt dataset.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed container, checkpoint or image file.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SfeError {
    pub fn config(msg: impl Into<String>) -> Self {
        SfeError::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        SfeError::Shape(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        SfeError::Numeric(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        SfeError::Data(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        SfeError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SfeError::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $err:expr) => {
        if !$cond {
            return Err($err);
        }
    };
}
pub(crate) use ensure;
