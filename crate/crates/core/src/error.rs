use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the retrieval pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate node id {0}")]
    DuplicateNode(String),

    #[error("unknown node {0}")]
    UnknownNode(String),

    #[error("query {qid}: unknown target {target}")]
    UnknownTarget { qid: String, target: String },

    #[error("query {0} has no targets")]
    EmptyTargets(String),

    #[error("duplicate qid {0}")]
    DuplicateQid(String),

    #[error("graph has no nodes")]
    EmptyGraph,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("illegal action: {0}")]
    IllegalAction(String),

    #[error("state is already stopped")]
    Stopped,

    #[error("trajectory has not terminated")]
    NotTerminated,

    #[error("reward must be positive: {0}")]
    ZeroReward(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("enumeration exceeded node budget of {0} states")]
    BudgetExceeded(usize),

    #[error("state has zero flow")]
    ZeroFlow,

    #[error("qid mismatch: {0}")]
    QidMismatch(String),

    #[error("infeasible benchmark config at query {index}: {reason}")]
    Infeasible { index: usize, reason: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable identifier for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::DuplicateNode(_) => "duplicate_node",
            Error::UnknownNode(_) => "unknown_node",
            Error::UnknownTarget { .. } => "unknown_target",
            Error::EmptyTargets(_) => "empty_targets",
            Error::DuplicateQid(_) => "duplicate_qid",
            Error::EmptyGraph => "empty_graph",
            Error::DimMismatch { .. } => "dim_mismatch",
            Error::IllegalAction(_) => "illegal_action",
            Error::Stopped => "stopped",
            Error::NotTerminated => "not_terminated",
            Error::ZeroReward(_) => "zero_reward",
            Error::Config(_) => "config",
            Error::NonFinite(_) => "non_finite",
            Error::BudgetExceeded(_) => "budget_exceeded",
            Error::ZeroFlow => "zero_flow",
            Error::QidMismatch(_) => "qid_mismatch",
            Error::Infeasible { .. } => "infeasible",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
