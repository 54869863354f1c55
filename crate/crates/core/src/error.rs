use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the few-shot pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: left is {left:?}, right is {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt payload at byte offset {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },

    #[error("validation error in {context}: {reason}")]
    Validation { context: String, reason: String },

    #[error("sizing error: {0}")]
    Sizing(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

/// Coarse error class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::DimensionMismatch { .. }
            | Error::Shape(_)
            | Error::Usage(_)
            | Error::Config(_)
            | Error::Template(_) => ErrorClass::Usage,
            Error::NonFinite(_) => ErrorClass::Numeric,
            Error::Format(_)
            | Error::Version { .. }
            | Error::Corrupt { .. }
            | Error::Validation { .. }
            | Error::Sizing(_)
            | Error::Io { .. }
            | Error::Csv { .. } => ErrorClass::Data,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
