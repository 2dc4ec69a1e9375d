use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure categories surfaced by the library. The CLI maps each category to
/// its own exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("template error: {0}")]
    Template(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("objective failed at iteration {iteration}: {source}")]
    Objective {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category label used in CLI diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Contract(_) | Error::Shape { .. } | Error::Invariant(_) => "contract",
            Error::NonFinite(_) => "numeric",
            Error::Template(_) | Error::Data(_) => "data",
            Error::Objective { .. } => "objective",
            Error::Io { .. } => "io",
            Error::Serde(_) => "format",
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape {
            context,
            expected,
            actual,
        })
    }
}

pub(crate) fn check_finite(context: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}
