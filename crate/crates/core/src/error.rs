use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the forecasting pipeline.
///
/// The variants map onto the CLI exit codes: `Numeric` is a numeric
/// failure (exit 3), everything else is a usage or data problem (exit 2).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    /// Several independent validation failures, one message per row.
    #[error("{} invalid row(s):\n{}", .0.len(), .0.join("\n"))]
    Validation(Vec<String>),

    #[error("parameter error: {0}")]
    Param(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("backward error: {0}")]
    Backward(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
