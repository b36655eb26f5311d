use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("split {split} would receive no identities")]
    EmptySplit { split: String },

    #[error("degenerate face: landmark bounding box has zero width or height")]
    DegenerateFace,

    #[error("sequence too short: {frames} frames, need at least {needed}")]
    TooShort { frames: usize, needed: usize },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("receptive field {actual} does not match clip length {expected}")]
    ReceptiveField { expected: usize, actual: usize },

    #[error("empty pull set for identity {0}")]
    EmptyPullSet(String),

    #[error("empty push set for identity {0}")]
    EmptyPushSet(String),

    #[error("degenerate probability: pull and push terms are both zero")]
    Degenerate,

    #[error("insufficient data for identity {identity}: {category}")]
    InsufficientData { identity: String, category: String },

    #[error("non-finite loss at iteration {iteration}; last good checkpoint: {last_checkpoint}")]
    NonFiniteLoss {
        iteration: u64,
        last_checkpoint: String,
    },

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("manifest fingerprint {found} does not match checkpoint fingerprint {expected}")]
    ManifestMismatch { expected: String, found: String },

    #[error("no scoreable identity in split")]
    NoScoreableIdentity,

    #[error("could not satisfy signature margin after {attempts} attempts")]
    Margin { attempts: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable name of the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "IoError",
            Error::Parse(_) => "ParseError",
            Error::Validation(_) => "ValidationError",
            Error::Shape(_) => "ShapeError",
            Error::NonFinite(_) => "NonFiniteError",
            Error::EmptySplit { .. } => "EmptySplitError",
            Error::DegenerateFace => "DegenerateFaceError",
            Error::TooShort { .. } => "TooShortError",
            Error::Graph(_) => "GraphError",
            Error::ReceptiveField { .. } => "ReceptiveFieldError",
            Error::EmptyPullSet(_) => "EmptyPullSetError",
            Error::EmptyPushSet(_) => "EmptyPushSetError",
            Error::Degenerate => "DegenerateError",
            Error::InsufficientData { .. } => "InsufficientDataError",
            Error::NonFiniteLoss { .. } => "NonFiniteLossError",
            Error::Version { .. } => "VersionError",
            Error::ManifestMismatch { .. } => "ManifestMismatchError",
            Error::NoScoreableIdentity => "NoScoreableIdentityError",
            Error::Margin { .. } => "MarginError",
        }
    }

    /// Errors caused by bad inputs rather than failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse(_)
                | Error::Validation(_)
                | Error::Shape(_)
                | Error::NonFinite(_)
                | Error::EmptySplit { .. }
                | Error::ReceptiveField { .. }
                | Error::Version { .. }
                | Error::ManifestMismatch { .. }
                | Error::TooShort { .. }
                | Error::InsufficientData { .. }
                | Error::DegenerateFace
        )
    }
}
