use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = IbtError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum IbtError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl IbtError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        IbtError::Dimension(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IbtError::Io {
            path: path.into(),
            source,
        }
    }
}
