use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum OffcemError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("support violation: target puts mass on action {action} in context {context} but logging probability is zero")]
    ActionSupport { context: usize, action: usize },

    #[error("support violation: target puts mass on cluster {cluster} in context {context} but logging probability is zero")]
    ClusterSupport { context: usize, cluster: usize },

    #[error("support violation: target puts mass on embedding {embedding} in context {context} but logging probability is zero")]
    EmbeddingSupport { context: usize, embedding: usize },

    #[error("policy row {context} has no remaining mass after removing unsupported actions")]
    DegeneratePolicy { context: usize },

    #[error("estimator `{kind}` requires a reward model")]
    MissingModel { kind: &'static str },

    #[error("estimator `{kind}` requires the logging policy table")]
    MissingLoggingPolicy { kind: &'static str },

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("insufficient data: {needed} records needed, {available} available")]
    InsufficientData { needed: usize, available: usize },

    #[error("no qualifying record pairs for pairwise regression")]
    EmptyPairs,

    #[error("not enumerable: {0}")]
    NotEnumerable(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = OffcemError> = std::result::Result<T, E>;

impl OffcemError {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        OffcemError::Invalid {
            what,
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag, used in reports for failed cells.
    pub fn tag(&self) -> &'static str {
        match self {
            OffcemError::Dimension { .. } => "dimension",
            OffcemError::Invalid { .. } => "invalid",
            OffcemError::ActionSupport { .. } => "action_support",
            OffcemError::ClusterSupport { .. } => "cluster_support",
            OffcemError::EmbeddingSupport { .. } => "embedding_support",
            OffcemError::DegeneratePolicy { .. } => "degenerate_policy",
            OffcemError::MissingModel { .. } => "missing_model",
            OffcemError::MissingLoggingPolicy { .. } => "missing_logging_policy",
            OffcemError::TrainingDiverged { .. } => "training_diverged",
            OffcemError::InsufficientData { .. } => "insufficient_data",
            OffcemError::EmptyPairs => "empty_pairs",
            OffcemError::NotEnumerable(_) => "not_enumerable",
            OffcemError::Precondition(_) => "precondition",
            OffcemError::Io { .. } | OffcemError::Csv { .. } | OffcemError::Json { .. } => "io",
        }
    }
}
