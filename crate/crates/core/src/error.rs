use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("storage error at {}: {source}", path.display())]
    Storage {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("format error in {} at byte {offset}: {msg}", path.display())]
    Format {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("config error in {}: {msg}", path.display())]
    Config { path: PathBuf, msg: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub fn storage(path: impl AsRef<Path>, source: io::Error) -> Self {
        Error::Storage {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn config(path: impl AsRef<Path>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.as_ref().to_path_buf(),
            msg: msg.into(),
        }
    }

    /// Wrap in a stage error unless it already names one.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage: stage.into(),
                source: Box::new(e),
            },
        }
    }
}

/// A decode failure before the file path is known.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeError {
    pub offset: usize,
    pub msg: String,
}

impl DecodeError {
    pub fn new(offset: usize, msg: impl Into<String>) -> Self {
        Self {
            offset,
            msg: msg.into(),
        }
    }

    pub fn at(self, path: impl AsRef<Path>) -> Error {
        Error::Format {
            path: path.as_ref().to_path_buf(),
            offset: self.offset,
            msg: self.msg,
        }
    }
}
