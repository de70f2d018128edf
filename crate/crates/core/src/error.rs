//! Crate-wide error type.
//!
//! Every fallible operation in the library returns [`Result`]. The variants
//! map onto distinct failure classes so callers (notably the CLI) can
//! translate them into exit codes without string matching.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the forecasting library.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor operation received inconsistent shapes.
    #[error("{op}: shape mismatch: {detail}")]
    Shape {
        /// Operation that rejected its inputs.
        op: &'static str,
        /// Description naming the offending axes.
        detail: String,
    },

    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A forward value, loss, or gradient stopped being finite.
    #[error("non-finite value encountered in {context}")]
    NonFinite {
        /// Where the NaN/Inf was detected.
        context: String,
    },

    /// Training diverged; parameters are left at the last finite state.
    #[error("training diverged at epoch {epoch}: loss became non-finite; parameters kept at last finite state")]
    Diverged {
        /// Epoch (1-based) at which the loss stopped being finite.
        epoch: usize,
    },

    /// The gradient-check oracle could not run.
    #[error("gradient check oracle: {0}")]
    Oracle(String),

    /// An I/O failure, annotated with the path involved.
    #[error("I/O error on {path}: {source}")]
    Io {
        /// Path being read or written.
        path: String,
        /// Underlying error.
        #[source]
        source: std::io::Error,
    },

    /// A file does not follow the expected container format.
    #[error("format error: {0}")]
    Format(String),

    /// A container version this build does not understand.
    #[error("unsupported format version {found} (supported: {supported})")]
    Version {
        /// Version found in the file.
        found: u16,
        /// Newest version this build reads.
        supported: u16,
    },

    /// Declared and actual payload sizes disagree.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A text source row could not be parsed.
    #[error("parse error at line {line}: {detail}")]
    Parse {
        /// 1-based line number in the source file.
        line: usize,
        /// What went wrong, naming the column where known.
        detail: String,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
