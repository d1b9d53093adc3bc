use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library. Contract violations are caller bugs
/// (wrong shapes, empty batches); configuration errors come from invalid
/// settings; the rest are runtime failures.
#[derive(Debug, Error)]
pub enum GleadError {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training diverged at {images_shown} images: {detail}")]
    Diverged { images_shown: u64, detail: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = GleadError> = std::result::Result<T, E>;

impl GleadError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GleadError::Io { path: path.into(), source }
    }
}

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::GleadError::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
