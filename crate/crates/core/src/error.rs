use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the editing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("entity mention not found in continuation")]
    EntityNotFound,

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("distribution is not normalized (sum = {0})")]
    Unnormalized(f64),

    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("continuation has no supervised positions (ell = {ell}, len = {len})")]
    SkipContinuation { ell: usize, len: usize },

    #[error("edit failed: {0}")]
    EditFailed(String),

    #[error("not implemented: {0}")]
    NotImplemented(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("world schema exhausted: {0}")]
    SchemaExhausted(String),

    #[error("unknown entity {0}")]
    UnknownEntity(String),

    #[error("insufficient pool: need {need}, have {have}")]
    InsufficientPool { need: usize, have: usize },

    #[error("specificity probes overlap edited entities: {0:?}")]
    SpecificityOverlap(Vec<String>),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit status for the command-line tool: 2 for configuration
    /// errors, 3 for missing artifacts, 4 for numerical failures, 1 for
    /// anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::NotImplemented(_)
            | Error::SchemaExhausted(_)
            | Error::InsufficientPool { .. }
            | Error::SpecificityOverlap(_)
            | Error::UnknownEntity(_) => 2,
            Error::MissingArtifact(_) => 3,
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 3,
            Error::NonFinite { .. } | Error::Unnormalized(_) | Error::EditFailed(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
