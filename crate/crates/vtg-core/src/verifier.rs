//! Candidate verification: zoom-in expansion, boundary-marker layout for the
//! verifier's visual input, boolean-likelihood scoring, best-candidate
//! selection, and training-label assignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::interval_iou;
use crate::types::{clamp_moment, Moment};

/// Fraction of a moment's length added on each side by [`zoom_in`].
pub const DEFAULT_EXPANSION_RATIO: f64 = 0.5;

/// IoU threshold for assigning boolean verifier training labels.
pub const VERIFIER_LABEL_IOU: f64 = 0.5;

/// Expand a moment by half its length on both sides, clamped to the video.
pub fn zoom_in(m: &Moment, duration: f64) -> Result<Moment> {
    zoom_in_with(m, duration, DEFAULT_EXPANSION_RATIO)
}

/// [`zoom_in`] with a configurable per-side expansion ratio.
pub fn zoom_in_with(m: &Moment, duration: f64, ratio: f64) -> Result<Moment> {
    if !(duration > 0.0) {
        return Err(Error::Range(format!(
            "duration must be positive, got {duration}"
        )));
    }
    m.validate()?;
    if !m.within(duration) {
        return Err(Error::Range(format!(
            "moment [{}, {}] outside [0, {duration}]",
            m.start, m.end
        )));
    }
    if m.len() <= 0.0 {
        return Err(Error::Range(
            "zoom-in requires a positive-length moment".into(),
        ));
    }
    if !(ratio >= 0.0) {
        return Err(Error::Range(format!(
            "expansion ratio must be >= 0, got {ratio}"
        )));
    }
    let pad = ratio * m.len();
    let expanded = Moment {
        start: m.start - pad,
        end: m.end + pad,
        score: m.score,
    };
    Ok(clamp_moment(&expanded, duration))
}

/// Where the boundary markers go among the sampled frames of an expanded
/// segment. Indices are insertion positions into the frame sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentLayout {
    pub expanded: Moment,
    pub frame_times: Vec<f64>,
    /// The start marker is inserted before this frame index.
    pub start_insert_index: usize,
    /// The end marker is inserted at this position (after the last frame
    /// that is still inside the original moment).
    pub end_insert_index: usize,
    /// Set when no sampled frame fell inside the original moment; both
    /// indices then collapse to the insertion point of the original start.
    pub empty_span: bool,
}

/// Uniform midpoint sampling of `n` frame timestamps inside a segment.
pub fn sample_segment_frames(segment: &Moment, n: usize) -> Vec<f64> {
    let len = segment.len();
    (0..n)
        .map(|i| segment.start + (i as f64 + 0.5) * len / n as f64)
        .collect()
}

/// Place the boundary markers: the start marker goes before the first frame
/// at or after `original.start`, the end marker after the last frame at or
/// before `original.end`.
pub fn layout_segment_tokens(
    original: &Moment,
    expanded: Moment,
    frame_times: Vec<f64>,
) -> Result<SegmentLayout> {
    original.validate()?;
    for pair in frame_times.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::Range(
                "frame_times must be strictly ascending".into(),
            ));
        }
    }
    const SLACK: f64 = 1e-9;
    if let (Some(&first), Some(&last)) = (frame_times.first(), frame_times.last()) {
        if first < expanded.start - SLACK || last > expanded.end + SLACK {
            return Err(Error::Range(
                "frame_times must lie inside the expanded segment".into(),
            ));
        }
    }
    let start_insert_index = frame_times
        .iter()
        .position(|&t| t >= original.start)
        .unwrap_or(frame_times.len());
    let last_inside = frame_times.iter().rposition(|&t| t <= original.end);
    let (start_insert_index, end_insert_index, empty_span) = match last_inside {
        Some(last) if last + 1 > start_insert_index => (start_insert_index, last + 1, false),
        // no sampled frame inside the original moment
        _ => (start_insert_index, start_insert_index, true),
    };
    Ok(SegmentLayout {
        expanded,
        frame_times,
        start_insert_index,
        end_insert_index,
        empty_span,
    })
}

/// Boolean-likelihood verdict for one candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifierScore {
    pub candidate_index: usize,
    pub l_yes: f64,
    pub l_no: f64,
    /// `sigmoid(l_yes - l_no)`, in `(0, 1)`.
    pub score: f64,
}

impl VerifierScore {
    pub fn new(candidate_index: usize, l_yes: f64, l_no: f64) -> Result<Self> {
        if !l_yes.is_finite() || !l_no.is_finite() {
            return Err(Error::Numeric(
                "verifier log-likelihoods must be finite".into(),
            ));
        }
        Ok(VerifierScore {
            candidate_index,
            l_yes,
            l_no,
            score: score_candidate(l_yes, l_no),
        })
    }
}

/// Confidence that a segment covers the queried moment: `sigmoid(Ly - Ln)`.
pub fn score_candidate(l_yes: f64, l_no: f64) -> f64 {
    1.0 / (1.0 + (-(l_yes - l_no)).exp())
}

/// The highest-scoring candidate; ties go to the lower candidate index
/// (higher grounder rank).
pub fn select_best(scores: &[VerifierScore], cands: &[Moment]) -> Result<(Moment, usize)> {
    if scores.is_empty() || scores.len() != cands.len() {
        return Err(Error::Input(format!(
            "need equal non-empty scores/candidates, got {} and {}",
            scores.len(),
            cands.len()
        )));
    }
    let mut best = &scores[0];
    for s in &scores[1..] {
        if s.score > best.score
            || (s.score == best.score && s.candidate_index < best.candidate_index)
        {
            best = s;
        }
    }
    Ok((cands[best.candidate_index], best.candidate_index))
}

/// Training label for the verifier: true iff IoU against gt is at least 0.5.
pub fn assign_verifier_label(cand: &Moment, gt: &Moment) -> bool {
    interval_iou(cand, gt) >= VERIFIER_LABEL_IOU
}
