//! Shared domain vocabulary: time intervals, video metadata, feature grids,
//! reasoning plans, and pipeline results.
//!
//! All public times are in seconds; normalization to `[0, 1]` happens only
//! inside the decoder and the metrics. All numeric math is `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A closed time interval `[start, end]` in seconds, optionally scored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    pub start: f64,
    pub end: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub score: Option<f64>,
}

impl Moment {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        let m = Moment {
            start,
            end,
            score: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_score(start: f64, end: f64, score: f64) -> Result<Self> {
        let m = Moment {
            start,
            end,
            score: Some(score),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.start.is_finite() || !self.end.is_finite() {
            return Err(Error::Numeric(format!(
                "moment endpoints must be finite, got [{}, {}]",
                self.start, self.end
            )));
        }
        if self.start > self.end {
            return Err(Error::Range(format!(
                "moment start {} exceeds end {}",
                self.start, self.end
            )));
        }
        if let Some(s) = self.score {
            if !s.is_finite() || !(0.0..=1.0).contains(&s) {
                return Err(Error::Range(format!("score {s} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0.0
    }

    /// True iff the interval lies inside `[0, duration]`.
    pub fn within(&self, duration: f64) -> bool {
        self.start >= 0.0 && self.end <= duration
    }
}

/// Normalized `(start/duration, end/duration)` view of a moment.
pub fn moment_normalize(m: &Moment, duration: f64) -> Result<(f64, f64)> {
    if duration <= 0.0 {
        return Err(Error::Range(format!(
            "duration must be positive, got {duration}"
        )));
    }
    if !m.within(duration) {
        return Err(Error::Range(format!(
            "moment [{}, {}] outside [0, {duration}]",
            m.start, m.end
        )));
    }
    Ok((m.start / duration, m.end / duration))
}

/// Clip a moment's endpoints into `[0, duration]`, preserving order and score.
pub fn clamp_moment(m: &Moment, duration: f64) -> Moment {
    let start = m.start.clamp(0.0, duration);
    let end = m.end.clamp(0.0, duration);
    Moment {
        start,
        end: end.max(start),
        score: m.score,
    }
}

/// Identity and timing of one video clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub video_id: String,
    pub duration: f64,
    #[serde(default)]
    pub frame_timestamps: Vec<f64>,
}

impl VideoMeta {
    pub fn new(
        video_id: impl Into<String>,
        duration: f64,
        frame_timestamps: Vec<f64>,
    ) -> Result<Self> {
        let v = VideoMeta {
            video_id: video_id.into(),
            duration,
            frame_timestamps,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.video_id.is_empty() {
            return Err(Error::Input("video_id must be non-empty".into()));
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::Range(format!(
                "duration must be positive and finite, got {}",
                self.duration
            )));
        }
        for pair in self.frame_timestamps.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Range(format!(
                    "frame timestamps must be strictly increasing, got {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        if let (Some(&first), Some(&last)) =
            (self.frame_timestamps.first(), self.frame_timestamps.last())
        {
            if first < 0.0 || last > self.duration {
                return Err(Error::Range(format!(
                    "frame timestamps [{first}, {last}] outside [0, {}]",
                    self.duration
                )));
            }
        }
        Ok(())
    }
}

/// Per-frame hidden-state grid of shape `T x H x W x D`, row-major `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub values: Vec<f64>,
    pub frame_times: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(
        t: usize,
        h: usize,
        w: usize,
        d: usize,
        values: Vec<f64>,
        frame_times: Vec<f64>,
    ) -> Result<Self> {
        let f = FeatureSequence {
            t,
            h,
            w,
            d,
            values,
            frame_times,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let expect = self.t * self.h * self.w * self.d;
        if self.values.len() != expect {
            return Err(Error::Shape(format!(
                "feature values length {} != T*H*W*D = {expect}",
                self.values.len()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature values must be finite".into()));
        }
        if self.frame_times.len() != self.t {
            return Err(Error::Shape(format!(
                "frame_times length {} != T = {}",
                self.frame_times.len(),
                self.t
            )));
        }
        for pair in self.frame_times.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Range(
                    "frame_times must be strictly ascending".into(),
                ));
            }
        }
        Ok(())
    }

    /// The flat `H*W*D` token block of frame `t`.
    pub fn frame(&self, t: usize) -> &[f64] {
        let stride = self.h * self.w * self.d;
        &self.values[t * stride..(t + 1) * stride]
    }
}

/// Hidden state of the query token driving the timestamp decoder; length `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegToken {
    pub values: Vec<f64>,
}

impl RegToken {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("reg token values must be finite".into()));
        }
        Ok(RegToken { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// One dataset row: a video plus query/question text and ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub video_id: String,
    pub duration: f64,
    pub query: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub question: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub options: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub answer_index: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub subtitles: Option<String>,
    pub gt_moments: Vec<Moment>,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        if self.video_id.is_empty() {
            return Err(Error::Input("video_id must be non-empty".into()));
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::Range(format!(
                "duration must be positive, got {}",
                self.duration
            )));
        }
        for m in &self.gt_moments {
            m.validate()?;
            if !m.within(self.duration) {
                return Err(Error::Range(format!(
                    "gt moment [{}, {}] outside [0, {}]",
                    m.start, m.end, self.duration
                )));
            }
        }
        if let (Some(idx), Some(opts)) = (self.answer_index, &self.options) {
            if idx >= opts.len() {
                return Err(Error::Range(format!(
                    "answer_index {idx} out of range for {} options",
                    opts.len()
                )));
            }
        }
        Ok(())
    }
}

/// The agent roles. `Planner` never appears inside a plan; it coordinates one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Planner,
    Grounder,
    Verifier,
    Answerer,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Role::Planner => "planner",
            Role::Grounder => "grounder",
            Role::Verifier => "verifier",
            Role::Answerer => "answerer",
        };
        f.write_str(s)
    }
}

/// One step of a reasoning plan. Only the grounder call carries a `value`
/// (the grounding query, possibly rephrased by the planner).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleCall {
    #[serde(rename = "type")]
    pub role: Role,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub value: Option<String>,
}

impl RoleCall {
    pub fn grounder(query: impl Into<String>) -> Self {
        RoleCall {
            role: Role::Grounder,
            value: Some(query.into()),
        }
    }

    pub fn bare(role: Role) -> Self {
        RoleCall { role, value: None }
    }
}

/// Validated sequence of role calls. Always one of the three canonical plans:
/// grounder+verifier+answerer, grounder+verifier, or answerer only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReasoningPlan {
    pub calls: Vec<RoleCall>,
}

impl ReasoningPlan {
    pub fn contains(&self, role: Role) -> bool {
        self.calls.iter().any(|c| c.role == role)
    }

    /// The grounding query, when the plan has a grounder step.
    pub fn grounding_query(&self) -> Option<&str> {
        self.calls
            .iter()
            .find(|c| c.role == Role::Grounder)
            .and_then(|c| c.value.as_deref())
    }
}

/// One role invocation in a pipeline trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub role: Role,
    pub input_digest: String,
    pub output_digest: String,
}

/// Final output of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub answer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub selected_moment: Option<Moment>,
    pub candidates: Vec<Moment>,
    pub plan: ReasoningPlan,
    pub trace: Vec<TraceEntry>,
    #[serde(default)]
    pub degraded: bool,
}

impl PipelineResult {
    pub fn validate(&self) -> Result<()> {
        if let Some(sel) = &self.selected_moment {
            let found = self
                .candidates
                .iter()
                .any(|c| c.start == sel.start && c.end == sel.end);
            if !found {
                return Err(Error::Input(
                    "selected_moment is not one of the candidates".into(),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_basic() {
        let m = Moment::new(10.0, 20.0).unwrap();
        let (s, e) = moment_normalize(&m, 60.0).unwrap();
        assert!((s - 10.0 / 60.0).abs() < 1e-12);
        assert!((e - 20.0 / 60.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_full_span_and_point() {
        let full = Moment::new(0.0, 60.0).unwrap();
        assert_eq!(moment_normalize(&full, 60.0).unwrap(), (0.0, 1.0));
        let point = Moment::new(30.0, 30.0).unwrap();
        assert_eq!(moment_normalize(&point, 60.0).unwrap(), (0.5, 0.5));
    }

    #[test]
    fn normalize_out_of_range_rejected() {
        let m = Moment::new(50.0, 70.0).unwrap();
        assert!(matches!(moment_normalize(&m, 60.0), Err(Error::Range(_))));
        assert!(matches!(moment_normalize(&m, 0.0), Err(Error::Range(_))));
    }

    #[test]
    fn clamp_cases() {
        let dur = 60.0;
        let m = Moment {
            start: -3.0,
            end: 5.0,
            score: None,
        };
        let c = clamp_moment(&m, dur);
        assert_eq!((c.start, c.end), (0.0, 5.0));
        let m = Moment {
            start: 55.0,
            end: 70.0,
            score: None,
        };
        let c = clamp_moment(&m, dur);
        assert_eq!((c.start, c.end), (55.0, 60.0));
        let m = Moment::new(10.0, 20.0).unwrap();
        let c = clamp_moment(&m, dur);
        assert_eq!((c.start, c.end), (10.0, 20.0));
    }

    #[test]
    fn moment_invariants_enforced() {
        assert!(Moment::new(5.0, 3.0).is_err());
        assert!(Moment::new(f64::NAN, 3.0).is_err());
        assert!(Moment::with_score(0.0, 1.0, 1.5).is_err());
        assert!(Moment::with_score(0.0, 1.0, 0.5).is_ok());
    }

    #[test]
    fn video_meta_ordering_enforced() {
        assert!(VideoMeta::new("v", 10.0, vec![0.0, 1.0, 2.0]).is_ok());
        assert!(VideoMeta::new("v", 10.0, vec![0.0, 2.0, 1.0]).is_err());
        assert!(VideoMeta::new("", 10.0, vec![]).is_err());
        assert!(VideoMeta::new("v", 10.0, vec![0.0, 11.0]).is_err());
    }

    #[test]
    fn feature_sequence_shape_checked() {
        assert!(FeatureSequence::new(2, 1, 1, 3, vec![0.0; 6], vec![0.0, 1.0]).is_ok());
        assert!(FeatureSequence::new(2, 1, 1, 3, vec![0.0; 5], vec![0.0, 1.0]).is_err());
        assert!(FeatureSequence::new(2, 1, 1, 3, vec![f64::INFINITY; 6], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn annotation_record_gt_bounds() {
        let rec = AnnotationRecord {
            video_id: "v".into(),
            duration: 30.0,
            query: "q".into(),
            question: None,
            options: Some(vec!["a".into(), "b".into()]),
            answer_index: Some(2),
            subtitles: None,
            gt_moments: vec![Moment::new(0.0, 10.0).unwrap()],
        };
        assert!(rec.validate().is_err()); // answer_index out of range
        let rec = AnnotationRecord {
            answer_index: Some(1),
            ..rec
        };
        assert!(rec.validate().is_ok());
        let rec = AnnotationRecord {
            gt_moments: vec![Moment::new(0.0, 31.0).unwrap()],
            ..rec
        };
        assert!(rec.validate().is_err());
    }

    #[test]
    fn pipeline_result_selected_must_be_candidate() {
        let plan = ReasoningPlan {
            calls: vec![RoleCall::bare(Role::Answerer)],
        };
        let ok = PipelineResult {
            answer: None,
            selected_moment: Some(Moment::with_score(1.0, 2.0, 0.9).unwrap()),
            candidates: vec![Moment::with_score(1.0, 2.0, 0.9).unwrap()],
            plan: plan.clone(),
            trace: vec![],
            degraded: false,
        };
        assert!(ok.validate().is_ok());
        let bad = PipelineResult {
            candidates: vec![Moment::with_score(3.0, 4.0, 0.9).unwrap()],
            ..ok
        };
        assert!(bad.validate().is_err());
    }
}
