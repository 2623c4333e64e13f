use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid {what} at index {index}: {msg}")]
    Invariant {
        what: &'static str,
        index: usize,
        msg: String,
    },

    #[error("unknown material class id {0}")]
    UnknownClass(u8),

    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("motion script references unknown degree of freedom {0}")]
    UnknownDof(String),

    #[error("frame {index}: {msg}")]
    Frame { index: usize, msg: String },

    #[error("at least 3 joints are required for similarity alignment, got {0}")]
    TooFewJoints(usize),

    #[error("configuration: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn invariant(what: &'static str, index: usize, msg: impl Into<String>) -> Self {
        Error::Invariant {
            what,
            index,
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
