use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("channel mismatch in {op}: input has {input} channels, kernel expects {kernel}")]
    ChannelMismatch {
        op: &'static str,
        input: usize,
        kernel: usize,
    },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("loss node must be scalar, got shape {0}")]
    NotScalar(Shape),

    #[error("graph is not topologically ordered at node {node}")]
    GraphCycle { node: usize },

    #[error("batch norm '{0}' has no running statistics yet; run a training step first")]
    MissingRunningStats(String),

    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("non-finite training loss at epoch {epoch}, batch {batch} (shuffle seed {seed})")]
    Diverged { epoch: usize, batch: usize, seed: u64 },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint version mismatch: found {found:?}, expected {expected:?}")]
    Version { found: String, expected: String },

    #[error("tensor '{name}' has shape {found:?}, configuration expects {expected:?}")]
    TensorShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
}

/// Coarse failure class, used by the command line front-end to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFinite { .. } | Error::Diverged { .. } => ErrorKind::Numerical,
            Error::Config(_) | Error::InvalidArgument { .. } => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }
}
