use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("box ({x0},{y0},{x1},{y1}) lies outside the {height}x{width} grid")]
    BoxOutOfGrid {
        x0: i32,
        y0: i32,
        x1: i32,
        y1: i32,
        height: usize,
        width: usize,
    },

    #[error("non-finite value in tensor `{tensor}`")]
    NonFinite { tensor: String },

    #[error("{path}: {msg} (at byte offset {offset})")]
    Format {
        path: String,
        offset: u64,
        msg: String,
    },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("numerical check failed: {0}")]
    Numerical(String),

    #[error("config: {0}")]
    Config(String),

    #[error("sample generation gave up after {0} draws")]
    GenerationExhausted(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
