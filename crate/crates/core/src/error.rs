use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("backward needs a scalar root, got {0} entries")]
    NonScalarRoot(usize),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("parameter registered twice: {0}")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("agent {agent}: {message}")]
    Track { agent: u64, message: String },
    #[error("latent space of {size} assignments exceeds the enumeration cap {cap}")]
    EnumerationCap { size: usize, cap: usize },
    #[error("unknown agent id {0}")]
    UnknownAgent(u64),
    #[error("cannot condition on every agent of the clique")]
    AllConditioned,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("unsupported agent kind {0:?} for this model")]
    UnsupportedKind(crate::dynamics::AgentKind),
    #[error("posterior factors need future encodings")]
    MissingFuture,
    #[error("infeasible scenario parameters: {0}")]
    InfeasibleSpec(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
