use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the BEV pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate feature: {0}")]
    DegenerateFeature(String),
    #[error("empty context: {0}")]
    EmptyContext(&'static str),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("tape error: {0}")]
    Tape(String),
    #[error("no anchor has a positive correspondence")]
    NoOverlap,
    #[error("sampling contract violated: {0}")]
    SamplingContract(String),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: String },
    #[error("extent error: {0}")]
    Extent(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("internal consistency error: {0}")]
    Consistency(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
