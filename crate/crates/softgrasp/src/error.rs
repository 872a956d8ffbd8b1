//! Crate-wide error type.
//!
//! Every fallible public operation returns [`crate::Result`]. Variants are
//! grouped by pipeline stage so callers can match on the failing subsystem
//! without string inspection.

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Mesh topology or geometry is unusable (bad indices, degenerate
    /// elements, unsatisfiable generator parameters...).
    #[error("mesh: {0}")]
    Mesh(String),

    /// FEM assembly or solve failed (singular system, CG stagnation,
    /// iteration budget exhausted).
    #[error("fem: {0}")]
    Fem(String),

    /// Grasp construction failed (no antipodal hit, opening exceeds the
    /// gripper span, no contact after closure...).
    #[error("grasp: {0}")]
    Grasp(String),

    /// Graph construction or feature normalization failed.
    #[error("graph: {0}")]
    Graph(String),

    /// Network configuration, checkpoint, or autodiff failure.
    #[error("net: {0}")]
    Net(String),

    /// Dataset generation or training-loop failure.
    #[error("train: {0}")]
    Train(String),

    /// Planner failure (empty candidate set, ranking on degenerate scores...).
    #[error("plan: {0}")]
    Plan(String),

    /// Malformed or out-of-range configuration.
    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag for the CLI's JSON error envelope.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Mesh(_) => "mesh",
            Error::Fem(_) => "fem",
            Error::Grasp(_) => "grasp",
            Error::Graph(_) => "graph",
            Error::Net(_) => "net",
            Error::Train(_) => "train",
            Error::Plan(_) => "plan",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
