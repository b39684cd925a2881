use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::tasks::TaskError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("modulation has {got} blocks, network has {expected}")]
    BlockCount { expected: usize, got: usize },
    #[error("{what}: length {left} vs {right}")]
    LengthMismatch { what: &'static str, left: usize, right: usize },
    #[error("operator {0} cannot be generated")]
    Operator(String),
    #[error("empty support set")]
    EmptySupport,
    #[error("model {0} has no task encoder")]
    NoEncoder(String),
    #[error("training diverged at iteration {iteration}: {source} (task {task})")]
    Diverged { iteration: usize, task: String, source: AutodiffError },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
