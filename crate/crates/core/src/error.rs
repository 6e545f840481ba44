use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HionError> = std::result::Result<T, E>;

/// Errors raised by the differentiation engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum JetError {
    #[error("rejected input: {0}")]
    RejectedInput(String),
    #[error("division by a jet with zero value")]
    Singularity,
    #[error("jet order mismatch: {left} vs {right}")]
    OrderMismatch { left: usize, right: usize },
    #[error("jet order {have} is too low, {need} required")]
    InsufficientOrder { have: usize, need: usize },
    #[error("numeric overflow in {stage}")]
    NumericOverflow { stage: String },
    #[error("non-finite value at tape node {node} (of {len})")]
    NonFiniteNode { node: usize, len: usize },
}

#[derive(Debug, Error)]
pub enum HionError {
    #[error(transparent)]
    Jet(#[from] JetError),
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("system mismatch: expected {expected}, got {got}")]
    SystemMismatch { expected: String, got: String },
    #[error("training aborted at epoch {epoch}: {reason}")]
    TrainingAborted { epoch: usize, reason: String },
    #[error("simulation aborted at t = {t}: {reason}")]
    SimulationAborted { t: f64, reason: String },
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HionError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HionError::Io {
            path: path.into(),
            source,
        }
    }
}
