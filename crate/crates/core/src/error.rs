use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
///
/// The variants line up with the CLI exit codes: configuration problems,
/// data/format problems and numeric problems are kept apart so callers can
/// react differently.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric error: non-finite value produced by {0}")]
    Numeric(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn format(offset: usize, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 configuration, 2 data or format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 1,
            Error::Dimension(_)
            | Error::Format { .. }
            | Error::DegenerateData(_)
            | Error::Io { .. }
            | Error::Json(_) => 2,
            Error::Numeric(_) | Error::Training(_) => 3,
        }
    }

    /// Short stable tag used in machine-parsable CLI output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::Numeric(_) => "numeric",
            Error::Format { .. } => "format",
            Error::DegenerateData(_) => "degenerate_data",
            Error::Training(_) => "training",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
