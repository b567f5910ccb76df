//! Crate-wide error type.
//!
//! Errors carry enough context to be actionable from the command line. The
//! split exposed by [`Error::is_user_error`] drives process exit codes: bad
//! arguments/configuration exit with 1, failures while processing exit with 2.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("optimizer step rejected: non-finite gradient in parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("training diverged: loss not finite at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("degenerate calibration band: lower {lower} >= upper {upper}")]
    DegenerateBand { lower: f64, upper: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {what}: {detail}")]
    Parse { what: String, detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(what: impl Into<String>, detail: impl ToString) -> Self {
        Error::Parse { what: what.into(), detail: detail.to_string() }
    }

    /// True for errors caused by caller-supplied arguments, configuration or
    /// inputs that failed validation before any real work started.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::ShapeMismatch { .. }
                | Error::InvalidArgument { .. }
                | Error::InvalidConfig(_)
                | Error::EmptyInput { .. }
                | Error::DegenerateBand { .. }
                | Error::Parse { .. }
        )
    }
}

/// Failures specific to the binary checkpoint format. Each corruption mode has
/// its own variant so diagnostics name the actual problem.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("checksum mismatch: file is corrupt")]
    ChecksumMismatch,

    #[error("file truncated while reading {section}")]
    Truncated { section: &'static str },

    #[error("embedded config is invalid: {0}")]
    BadConfig(String),

    #[error("parameter `{name}`: {detail}")]
    BadParameter { name: String, detail: String },
}
