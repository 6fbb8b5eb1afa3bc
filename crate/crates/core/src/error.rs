//! Error type shared by every stage of the pipeline.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CgtError {
    #[error("{path}: row {row}, column {column}: {message}")]
    Ingest {
        path: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    EmptyInput { path: PathBuf, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("time index {t} is below the first valid index {first}")]
    Range { t: usize, first: usize },

    #[error("no valid timestamps: series of length {len} needs more than {needed} points")]
    EmptyStream { len: usize, needed: usize },

    #[error("edge list line {line}: {message}")]
    EdgeList { line: usize, message: String },

    #[error("degenerate GPD fit: {0}")]
    DegenerateFit(String),

    #[error("SPOT: {0}")]
    Spot(String),

    #[error("training failed for target {target}: {message}")]
    Training { target: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing artifact {path}: {message}")]
    MissingArtifact { path: PathBuf, message: String },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CgtError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CgtError {
    /// Wraps the error with the name of the pipeline stage that raised it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ CgtError::Stage { .. } => e,
            e => CgtError::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CgtError>;

pub(crate) fn invalid(message: impl Into<String>) -> CgtError {
    CgtError::InvalidArgument(message.into())
}
