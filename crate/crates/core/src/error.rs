use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its invariant. `field` names the offending key.
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("no agents supplied")]
    EmptyAgents,

    #[error("no examples")]
    NoExamples,

    #[error("{path}: row {row}: {reason}")]
    MalformedRow { path: PathBuf, row: usize, reason: String },

    #[error("local solver diverged for agent {agent} (learning rate {learning_rate})")]
    Diverged { agent: usize, learning_rate: f64 },

    #[error("member count mismatch at node {node}: children sum to {children}, node holds {node_count}")]
    CountMismatch { node: usize, children: usize, node_count: usize },

    #[error("hierarchy not built")]
    HierarchyNotBuilt,

    #[error("duplicate agent id {0}")]
    DuplicateAgent(usize),

    #[error("unknown agent id {0}")]
    UnknownAgent(usize),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config { .. } | Error::Schema(_) => true,
            Error::Round { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
