use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the audit pipeline.
///
/// Variants fall into two families: validation failures (bad input, bad
/// files, out-of-range arguments) and internal invariant breaches (an
/// explanation that does not add up to its prediction). The CLI maps them
/// to distinct exit codes via [`Error::is_internal`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("band index out of range: {index} (axis has {n_bands} bands)")]
    BandOutOfRange { index: usize, n_bands: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("schema fingerprint mismatch: expected {expected}, got {got}")]
    Fingerprint { expected: String, got: String },

    #[error("patch {patch}: {reason}")]
    Patch { patch: usize, reason: String },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("oracle intractable: {used} used features exceeds the limit of {limit}")]
    OracleIntractable { used: usize, limit: usize },

    #[error("internal invariant breached: {0}")]
    Internal(String),

    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn is_internal(&self) -> bool {
        match self {
            Error::Internal(_) => true,
            Error::InFile { source, .. } => source.is_internal(),
            _ => false,
        }
    }

    /// Attaches `path` unless the error already names a file.
    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        match self {
            Error::Io { .. } | Error::Format { .. } | Error::InFile { .. } => self,
            other => Error::InFile {
                path: path.into(),
                source: Box::new(other),
            },
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
