//! The role orchestration loop: parse and validate planner output, route
//! role calls through a pluggable backend, and assemble the pipeline result.
//!
//! One run executes: plan -> (ground -> top-k -> zoom-in -> verify each ->
//! argmax) -> answer, with the grounding stages skipped for answer-only
//! plans and the answer skipped for grounding-only plans.

mod backend;
pub mod prompts;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::moments::{nms, top_k, DEFAULT_NMS_IOU};
use crate::types::{Moment, PipelineResult, ReasoningPlan, Role, RoleCall, TraceEntry, VideoMeta};
use crate::verifier::{
    layout_segment_tokens, sample_segment_frames, select_best, zoom_in_with, SegmentLayout,
    VerifierScore, DEFAULT_EXPANSION_RATIO,
};

pub use backend::{
    FailingBackend, HttpBackend, HttpBackendConfig, MockBackend, RoleBackend, ScriptedBackend,
};

/// Why a planner output failed to become a [`ReasoningPlan`].
#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("plan parse error: {0}")]
    Json(String),
    #[error("unknown role `{role}` at position {pos}")]
    UnknownRole { pos: usize, role: String },
    #[error("role `{role}` at position {pos} cannot carry a value")]
    UnexpectedValue { pos: usize, role: Role },
    #[error("grounder call at position {pos} is missing its query value")]
    MissingValue { pos: usize },
    #[error("non-canonical plan at position {pos}: {detail}")]
    NonCanonical { pos: usize, detail: String },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCall {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    value: Option<String>,
}

fn strip_fences(raw: &str) -> &str {
    let trimmed = raw.trim();
    let Some(inner) = trimmed.strip_prefix("```") else {
        return trimmed;
    };
    let inner = inner.strip_prefix("json").unwrap_or(inner);
    inner.strip_suffix("```").unwrap_or(inner).trim()
}

/// Parse planner output into a validated reasoning plan.
///
/// Accepts exactly the three canonical sequences: grounder+verifier+answerer,
/// grounder+verifier, and answerer only. The grounder call carries the
/// (possibly rephrased) grounding query as its `value`.
pub fn parse_plan(raw: &str) -> std::result::Result<ReasoningPlan, PlanError> {
    let body = strip_fences(raw);
    let raw_calls: Vec<RawCall> =
        serde_json::from_str(body).map_err(|e| PlanError::Json(e.to_string()))?;
    let mut calls = Vec::with_capacity(raw_calls.len());
    for (pos, rc) in raw_calls.iter().enumerate() {
        let role = match rc.kind.as_str() {
            "planner" => Role::Planner,
            "grounder" => Role::Grounder,
            "verifier" => Role::Verifier,
            "answerer" => Role::Answerer,
            other => {
                return Err(PlanError::UnknownRole {
                    pos,
                    role: other.to_string(),
                });
            }
        };
        let value = rc.value.as_deref().map(str::trim).filter(|v| !v.is_empty());
        match role {
            Role::Grounder => {
                if value.is_none() {
                    return Err(PlanError::MissingValue { pos });
                }
            }
            _ => {
                if rc.value.is_some() {
                    return Err(PlanError::UnexpectedValue { pos, role });
                }
            }
        }
        calls.push(RoleCall {
            role,
            value: value.map(str::to_string),
        });
    }
    validate_canonical(&calls)?;
    Ok(ReasoningPlan { calls })
}

fn validate_canonical(calls: &[RoleCall]) -> std::result::Result<(), PlanError> {
    let role = |i: usize| calls.get(i).map(|c| c.role);
    match role(0) {
        None => Err(PlanError::NonCanonical {
            pos: 0,
            detail: "empty plan".into(),
        }),
        Some(Role::Answerer) => {
            if calls.len() > 1 {
                Err(PlanError::NonCanonical {
                    pos: 1,
                    detail: "answerer-only plans have a single call".into(),
                })
            } else {
                Ok(())
            }
        }
        Some(Role::Grounder) => {
            if role(1) != Some(Role::Verifier) {
                return Err(PlanError::NonCanonical {
                    pos: 1,
                    detail: "grounder must be followed by verifier".into(),
                });
            }
            match role(2) {
                None => Ok(()),
                Some(Role::Answerer) if calls.len() == 3 => Ok(()),
                Some(Role::Answerer) => Err(PlanError::NonCanonical {
                    pos: 3,
                    detail: "plan continues past answerer".into(),
                }),
                Some(other) => Err(PlanError::NonCanonical {
                    pos: 2,
                    detail: format!("expected answerer or end of plan, found {other}"),
                }),
            }
        }
        Some(other) => Err(PlanError::NonCanonical {
            pos: 0,
            detail: format!("plans start with grounder or answerer, found {other}"),
        }),
    }
}

/// Canonical JSON form of a plan; `parse_plan` of this text is the identity.
pub fn serialize_plan(plan: &ReasoningPlan) -> String {
    serde_json::to_string(plan).expect("plan serialization cannot fail")
}

/// Tuning knobs of one pipeline run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Candidates kept after suppression.
    pub top_k: usize,
    pub nms_iou: f64,
    /// Per-side zoom-in expansion as a fraction of candidate length.
    pub expansion_ratio: f64,
    /// Frames sampled inside each zoomed segment for the verifier.
    pub frames_per_segment: usize,
    /// Maximum concurrent verifier calls.
    pub verifier_concurrency: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            top_k: 5,
            nms_iou: DEFAULT_NMS_IOU,
            expansion_ratio: DEFAULT_EXPANSION_RATIO,
            frames_per_segment: 32,
            verifier_concurrency: 4,
        }
    }
}

/// One sample to run through the pipeline.
#[derive(Debug, Clone)]
pub struct PipelineInput {
    pub video: VideoMeta,
    /// Planner input; for grounding-only datasets this is the query text.
    pub question: String,
    pub options: Option<Vec<String>>,
    pub subtitles: Option<String>,
}

fn digest(payload: &str) -> String {
    let d = Sha256::digest(payload.as_bytes());
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn moments_payload(moments: &[Moment]) -> String {
    let triples: Vec<[f64; 3]> = moments
        .iter()
        .map(|m| [m.start, m.end, m.score.unwrap_or(0.0)])
        .collect();
    serde_json::to_string(&triples).expect("serializable")
}

fn pipeline_err(role: Role, err: Error, trace: &[TraceEntry]) -> Error {
    Error::Pipeline {
        role,
        message: err.to_string(),
        trace: trace.to_vec(),
    }
}

/// Gather verifier logits for every zoomed candidate, at most
/// `concurrency` calls in flight; results are ordered by candidate index.
fn verify_all(
    backend: &dyn RoleBackend,
    video: &VideoMeta,
    zoomed: &[Moment],
    layouts: &[SegmentLayout],
    query: &str,
    concurrency: usize,
) -> Vec<Result<(f64, f64)>> {
    let n = zoomed.len();
    let limit = concurrency.max(1);
    let mut results: Vec<Option<Result<(f64, f64)>>> = (0..n).map(|_| None).collect();
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(limit) {
        let chunk_results: Vec<(usize, Result<(f64, f64)>)> = std::thread::scope(|s| {
            let handles: Vec<(usize, std::thread::ScopedJoinHandle<'_, Result<(f64, f64)>>)> =
                chunk
                    .iter()
                    .map(|&i| {
                        let seg = &zoomed[i];
                        let layout = &layouts[i];
                        (
                            i,
                            s.spawn(move || backend.verify(video, i, seg, layout, query)),
                        )
                    })
                    .collect();
            handles
                .into_iter()
                .map(|(i, h)| {
                    let r = h
                        .join()
                        .unwrap_or_else(|_| Err(Error::Backend("verifier call panicked".into())));
                    (i, r)
                })
                .collect()
        });
        for (i, r) in chunk_results {
            results[i] = Some(r);
        }
    }
    results
        .into_iter()
        .map(|r| r.expect("all filled"))
        .collect()
}

/// Execute one full reasoning pass over a video sample.
///
/// The planner decides the role sequence; grounding failures with zero
/// usable candidates degrade to answering over the whole video (flagged in
/// the result rather than failing the batch).
pub fn run_pipeline(
    input: &PipelineInput,
    backend: &dyn RoleBackend,
    cfg: &PipelineConfig,
) -> Result<PipelineResult> {
    input.video.validate()?;
    let video = &input.video;
    let mut trace: Vec<TraceEntry> = Vec::new();

    let planner_in = format!("video={} question={}", video.video_id, input.question);
    let raw_plan = backend
        .plan(video, &input.question)
        .map_err(|e| pipeline_err(Role::Planner, e, &trace))?;
    trace.push(TraceEntry {
        role: Role::Planner,
        input_digest: digest(&planner_in),
        output_digest: digest(&raw_plan),
    });
    let plan =
        parse_plan(&raw_plan).map_err(|e| pipeline_err(Role::Planner, Error::Plan(e), &trace))?;

    if !plan.contains(Role::Grounder) {
        let answer = backend
            .answer(
                video,
                None,
                &input.question,
                input.options.as_deref(),
                input.subtitles.as_deref(),
            )
            .map_err(|e| pipeline_err(Role::Answerer, e, &trace))?;
        trace.push(TraceEntry {
            role: Role::Answerer,
            input_digest: digest(&format!(
                "video={} full question={}",
                video.video_id, input.question
            )),
            output_digest: digest(&answer),
        });
        let result = PipelineResult {
            answer: Some(answer),
            selected_moment: None,
            candidates: vec![],
            plan,
            trace,
            degraded: false,
        };
        result.validate()?;
        return Ok(result);
    }

    let query = plan
        .grounding_query()
        .expect("validated grounder value")
        .to_string();
    let raw_candidates = backend
        .ground(video, &query)
        .map_err(|e| pipeline_err(Role::Grounder, e, &trace))?;
    let mut candidates = top_k(&nms(&raw_candidates, cfg.nms_iou), cfg.top_k);
    // zero-length candidates carry no interval evidence and cannot be zoomed
    candidates.retain(|c| c.len() > 0.0 && c.within(video.duration));
    trace.push(TraceEntry {
        role: Role::Grounder,
        input_digest: digest(&format!("video={} query={}", video.video_id, query)),
        output_digest: digest(&moments_payload(&candidates)),
    });

    if candidates.is_empty() {
        let answer = backend
            .answer(
                video,
                None,
                &input.question,
                input.options.as_deref(),
                input.subtitles.as_deref(),
            )
            .map_err(|e| pipeline_err(Role::Answerer, e, &trace))?;
        trace.push(TraceEntry {
            role: Role::Answerer,
            input_digest: digest(&format!(
                "video={} full question={}",
                video.video_id, input.question
            )),
            output_digest: digest(&answer),
        });
        let result = PipelineResult {
            answer: Some(answer),
            selected_moment: None,
            candidates: vec![],
            plan,
            trace,
            degraded: true,
        };
        result.validate()?;
        return Ok(result);
    }

    let mut zoomed = Vec::with_capacity(candidates.len());
    let mut layouts = Vec::with_capacity(candidates.len());
    for cand in &candidates {
        let expanded = zoom_in_with(cand, video.duration, cfg.expansion_ratio)
            .map_err(|e| pipeline_err(Role::Verifier, e, &trace))?;
        let frames = sample_segment_frames(&expanded, cfg.frames_per_segment);
        let layout = layout_segment_tokens(cand, expanded, frames)
            .map_err(|e| pipeline_err(Role::Verifier, e, &trace))?;
        zoomed.push(expanded);
        layouts.push(layout);
    }

    let outcomes = verify_all(
        backend,
        video,
        &zoomed,
        &layouts,
        &query,
        cfg.verifier_concurrency,
    );
    let mut scores = Vec::with_capacity(outcomes.len());
    for (i, outcome) in outcomes.into_iter().enumerate() {
        let (l_yes, l_no) = outcome.map_err(|e| pipeline_err(Role::Verifier, e, &trace))?;
        let score = VerifierScore::new(i, l_yes, l_no)
            .map_err(|e| pipeline_err(Role::Verifier, e, &trace))?;
        trace.push(TraceEntry {
            role: Role::Verifier,
            input_digest: digest(&format!(
                "video={} candidate={i} segment=[{:.6},{:.6}] query={}",
                video.video_id, zoomed[i].start, zoomed[i].end, query
            )),
            output_digest: digest(&format!(
                "l_yes={:.12} l_no={:.12}",
                score.l_yes, score.l_no
            )),
        });
        scores.push(score);
    }
    let (selected, selected_idx) =
        select_best(&scores, &candidates).map_err(|e| pipeline_err(Role::Verifier, e, &trace))?;

    let answer = if plan.contains(Role::Answerer) {
        let segment = &zoomed[selected_idx];
        let answer = backend
            .answer(
                video,
                Some(segment),
                &input.question,
                input.options.as_deref(),
                input.subtitles.as_deref(),
            )
            .map_err(|e| pipeline_err(Role::Answerer, e, &trace))?;
        trace.push(TraceEntry {
            role: Role::Answerer,
            input_digest: digest(&format!(
                "video={} segment=[{:.6},{:.6}] question={}",
                video.video_id, segment.start, segment.end, input.question
            )),
            output_digest: digest(&answer),
        });
        Some(answer)
    } else {
        None
    };

    let result = PipelineResult {
        answer,
        selected_moment: Some(selected),
        candidates,
        plan,
        trace,
        degraded: false,
    };
    result.validate()?;
    Ok(result)
}
