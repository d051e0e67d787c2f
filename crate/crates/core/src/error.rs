use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("inconsistent state: {0}")]
    State(String),

    #[error("optimizer failure: {0}")]
    Optimizer(String),

    #[error("invalid model: {0}")]
    Model(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("objective undefined: {0}")]
    Objective(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code used by the command line driver.
    ///
    /// 2 is reserved for usage errors reported by the argument parser itself.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Shape(_)
            | Error::Input(_)
            | Error::Format { .. }
            | Error::Parse { .. }
            | Error::Io { .. } => 3,
            Error::State(_)
            | Error::Optimizer(_)
            | Error::Model(_)
            | Error::Metric(_)
            | Error::Objective(_) => 4,
        }
    }
}
