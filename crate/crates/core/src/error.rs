use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch { left: (usize, usize), right: (usize, usize) },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("backend failure during {stage}: {message}")]
    Backend { stage: String, message: String },
    #[error("kernel {kernel}: {source}")]
    Kernel {
        kernel: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Coarse classification used to map failures onto process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Backend,
}

impl Error {
    pub fn backend(stage: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Backend { stage: stage.into(), message: message.into() }
    }

    /// Re-tags a backend error with the pipeline stage it surfaced in.
    pub fn at_stage(self, stage: &str) -> Self {
        match self {
            Error::Backend { stage: inner, message } => Error::Backend { stage: format!("{stage}/{inner}"), message },
            other => other,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => ErrorKind::Config,
            Error::Backend { .. } | Error::Shape(_) => ErrorKind::Backend,
            Error::Kernel { source, .. } => source.kind(),
            Error::DimensionMismatch { .. }
            | Error::Data(_)
            | Error::Io { .. }
            | Error::Image { .. }
            | Error::Json(_)
            | Error::Csv(_) => ErrorKind::Data,
        }
    }
}
