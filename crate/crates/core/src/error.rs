use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no valid pixels to average over")]
    EmptyMask,

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("backward requested for a value that was never recorded by a forward pass")]
    NoForward,

    #[error("refinement loop overrun: iteration {iteration} >= limit {limit}")]
    LoopOverrun { iteration: usize, limit: usize },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss {loss} exceeded 10x the initial loss {initial} for {streak} consecutive steps")]
    Diverged {
        step: usize,
        loss: f64,
        initial: f64,
        streak: usize,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
