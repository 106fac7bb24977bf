use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid interval [{start}, {end}): {reason}")]
    InvalidInterval {
        start: usize,
        end: usize,
        reason: &'static str,
    },

    #[error("interval [{start}, {end}) lies outside [0, {length})")]
    OutOfRange { start: usize, end: usize, length: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("sequence of length {length} cannot be split into {parts} non-empty parts")]
    InsufficientLength { length: usize, parts: usize },

    #[error("teacher weight {value:e} at index {index} is degenerate")]
    DegenerateWeight { index: usize, value: f64 },

    #[error("embedding has zero norm")]
    DegenerateEmbedding,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed distribution for prefix {prefix:?}: {reason}")]
    InvalidDistribution { prefix: Vec<u32>, reason: String },

    #[error("training diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),

    #[error("{path}: {error}")]
    Io { path: PathBuf, error: std::io::Error },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("[{stage}] {inner}")]
    Stage { stage: &'static str, inner: Box<Error> },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    /// Tags an error with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                inner: Box::new(e),
            },
        }
    }
}
