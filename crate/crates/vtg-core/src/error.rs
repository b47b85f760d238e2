//! Crate-wide error type.

use crate::orchestrator::PlanError;
use crate::types::{Role, TraceEntry};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A value fell outside its documented domain (e.g. a moment outside the video).
    #[error("range error: {0}")]
    Range(String),

    /// Tensor or sequence dimensions are inconsistent.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite values where finite math is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Caller passed something structurally invalid (empty list, missing field).
    #[error("invalid input: {0}")]
    Input(String),

    #[error(transparent)]
    Plan(#[from] PlanError),

    /// A role call failed mid-pipeline; carries the trace of completed calls.
    #[error("pipeline error in role {role}: {message}")]
    Pipeline {
        role: Role,
        message: String,
        trace: Vec<TraceEntry>,
    },

    /// A prompt template slot was required but not provided.
    #[error("template error: missing slot `{0}`")]
    Template(String),

    /// Remote or mock backend failure (transport, protocol, bad payload).
    #[error("backend error: {0}")]
    Backend(String),

    /// A record in a JSONL file violated the schema.
    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    /// A tensor in a manifest/blob pair is malformed or mismatched.
    #[error("tensor `{name}`: {message}")]
    Tensor { name: String, message: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
