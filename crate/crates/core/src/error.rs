use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("domain fault in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("parse fault in {}: byte offset {offset}: {detail}", file.display())]
    Parse {
        file: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("format version mismatch in {}: found {found}, expected {expected}", file.display())]
    Version {
        file: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing {what}: {}", path.display())]
    MissingArtifact { what: String, path: PathBuf },

    #[error("hash mismatch for {what}: expected {expected}, found {found}")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("missing teacher targets for sample {0}")]
    MissingTarget(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status associated with each fault family.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingArtifact { .. } | Error::MissingTarget(_) => 3,
            Error::HashMismatch { .. } => 4,
            Error::Io { .. } | Error::Parse { .. } | Error::Version { .. } => 5,
            Error::Shape { .. } | Error::Domain { .. } | Error::NonFinite { .. } => 6,
            Error::Invalid(_) => 1,
        }
    }

    /// Short machine-readable identifier for the fault family.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Domain { .. } => "domain",
            Error::NonFinite { .. } => "non_finite",
            Error::Parse { .. } => "parse",
            Error::Version { .. } => "version",
            Error::Config(_) => "config",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::HashMismatch { .. } => "hash_mismatch",
            Error::MissingTarget(_) => "missing_target",
            Error::Io { .. } => "io",
            Error::Invalid(_) => "invalid",
        }
    }
}
