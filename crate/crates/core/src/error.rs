use std::path::PathBuf;

/// Errors raised anywhere in the library.
///
/// The variants map onto the CLI exit classes: dimension, configuration and
/// validation problems are user errors, numeric failures are reported
/// separately, and I/O and on-disk format problems form the third class.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: String, detail: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension { .. } | Error::Config(_) | Error::Validation(_) => 1,
            Error::Numeric { .. } => 2,
            Error::Io { .. } | Error::Format(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
