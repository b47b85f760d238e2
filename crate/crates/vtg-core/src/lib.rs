//! Temporal grounding toolkit for video reasoning pipelines.
//!
//! The crate provides four building blocks that compose into a grounded
//! video question-answering pipeline:
//!
//! - a numeric **timestamp decoder** ([`decoder`]) mapping frame features and
//!   a query token to multi-scale frame scores and boundary offsets, with
//!   full gradients for training ([`training`]);
//! - **interval post-processing** ([`moments`]): IoU/IoP, 1-D NMS, top-k;
//! - a **verifier stage** ([`verifier`]) that zooms into candidates and
//!   re-ranks them by boolean-likelihood scores;
//! - a **role orchestration loop** ([`orchestrator`]) that parses planner
//!   output and routes grounder/verifier/answerer calls through pluggable
//!   backends, plus an **evaluation harness** ([`eval`]) and the file
//!   formats and configuration ([`io`]) tying it together.

pub mod decoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod moments;
pub mod orchestrator;
pub mod training;
pub mod types;
pub mod verifier;

pub use error::{Error, Result};
pub use types::{
    AnnotationRecord, FeatureSequence, Moment, PipelineResult, ReasoningPlan, RegToken, Role,
    RoleCall, TraceEntry, VideoMeta,
};
