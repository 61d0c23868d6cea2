use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PolarError>;

#[derive(Debug, Error)]
pub enum PolarError {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("cannot normalize a zero vector")]
    ZeroVector,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unknown word '{0}'")]
    UnknownWord(String),

    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    TooLong { len: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("fingerprint mismatch: expected {expected}, found {found}")]
    Fingerprint { expected: String, found: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("site {0} not present")]
    MissingSite(String),

    #[error("unknown id '{0}'")]
    UnknownId(String),

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("{path} does not match the manifest (recorded sha256 {recorded}, found {found})")]
    Stale { path: PathBuf, recorded: String, found: String },

    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PolarError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PolarError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        PolarError::Shape(msg.into())
    }

    /// Short machine-friendly tag used by the CLI's single-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            PolarError::Shape(_) => "shape",
            PolarError::ZeroVector => "zero_vector",
            PolarError::NonFinite(_) => "non_finite",
            PolarError::Empty(_) => "empty",
            PolarError::UnknownWord(_) => "unknown_word",
            PolarError::TooLong { .. } => "too_long",
            PolarError::Config(_) => "config",
            PolarError::Fingerprint { .. } => "fingerprint",
            PolarError::Version { .. } => "version",
            PolarError::MissingSite(_) => "missing_site",
            PolarError::UnknownId(_) => "unknown_id",
            PolarError::Corrupt { .. } => "corrupt",
            PolarError::Stale { .. } => "stale_artifact",
            PolarError::Diverged { .. } => "diverged",
            PolarError::Io { .. } => "io",
            PolarError::Json(_) => "json",
        }
    }
}
