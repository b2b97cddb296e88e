use std::path::PathBuf;

use numcore::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("assembly error: {0}")]
    Assembly(String),
    #[error("metrics undefined: no target entry passes the mask")]
    UndefinedMetrics,
    #[error("non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {norms}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        norms: String,
    },
    #[error("{path}: line {line}: {msg}")]
    ConfigLine {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
