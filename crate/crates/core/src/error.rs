use std::path::PathBuf;

use hyperpeft_tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("sentinel capacity exceeded: need {needed} sentinels, vocabulary has {capacity}")]
    Capacity { needed: usize, capacity: usize },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("invalid config `{field}`: {constraint}")]
    Config { field: String, constraint: String },
    #[error("{what} index {index} out of range (must be < {bound})")]
    Index { what: &'static str, index: usize, bound: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("instrumentation failed, unmatched sites: {}", .0.join(", "))]
    UnmatchedSites(Vec<String>),
    #[error("host is already instrumented")]
    AlreadyInstrumented,
    #[error("non-finite loss at step {step} (task {task}, batch {batch_hash})")]
    NonFiniteLoss { step: u64, task: usize, batch_hash: String },
    #[error("checkpoint at step {step}: {message}")]
    Checkpoint { step: u64, message: String },
    #[error("missing files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    pub fn config(field: impl Into<String>, constraint: impl Into<String>) -> Self {
        Error::Config { field: field.into(), constraint: constraint.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
