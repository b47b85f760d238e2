//! File formats and configuration: annotation and prediction JSONL, feature
//! and weight tensor files, and the run configuration.

pub mod tensors;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, DecoderWeights};
use crate::error::{Error, Result};
use crate::orchestrator::{HttpBackendConfig, PipelineConfig};
use crate::training::LossParams;
use crate::types::{
    AnnotationRecord, FeatureSequence, Moment, PipelineResult, ReasoningPlan, RegToken,
};

use tensors::{read_tensor_file, write_tensor_file, RawTensor};

/// Load one annotation per JSONL line, validating each record.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let record: AnnotationRecord = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: lineno,
            message: e.to_string(),
        })?;
        record.validate().map_err(|e| Error::Schema {
            line: lineno,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn save_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    for r in records {
        r.validate()?;
    }
    let mut out = fs::File::create(path)?;
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

/// One prediction line: `{video_id, moments, answer?, plan, degraded?}` with
/// moments as `[start, end, score]` triples in rank order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    pub moments: Vec<(f64, f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub answer: Option<String>,
    pub plan: ReasoningPlan,
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub degraded: bool,
}

impl PredictionRecord {
    pub fn from_result(video_id: impl Into<String>, result: &PipelineResult) -> Self {
        // the selected moment leads; remaining candidates keep their order
        let mut moments: Vec<(f64, f64, f64)> = Vec::with_capacity(result.candidates.len());
        let selected = result.selected_moment;
        if let Some(sel) = &selected {
            moments.push((sel.start, sel.end, sel.score.unwrap_or(0.0)));
        }
        for c in &result.candidates {
            if let Some(sel) = &selected {
                if c.start == sel.start && c.end == sel.end {
                    continue;
                }
            }
            moments.push((c.start, c.end, c.score.unwrap_or(0.0)));
        }
        PredictionRecord {
            video_id: video_id.into(),
            moments,
            answer: result.answer.clone(),
            plan: result.plan.clone(),
            degraded: result.degraded,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.video_id.is_empty() {
            return Err(Error::Input("prediction video_id must be non-empty".into()));
        }
        for &(s, e, score) in &self.moments {
            if !(s.is_finite() && e.is_finite() && s <= e) {
                return Err(Error::Range(format!("bad prediction moment [{s}, {e}]")));
            }
            if !(0.0..=1.0).contains(&score) {
                return Err(Error::Range(format!(
                    "prediction score {score} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn ranked_moments(&self) -> Vec<Moment> {
        self.moments
            .iter()
            .map(|&(s, e, score)| Moment {
                start: s,
                end: e,
                score: Some(score),
            })
            .collect()
    }
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let record: PredictionRecord = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: lineno,
            message: e.to_string(),
        })?;
        record.validate().map_err(|e| Error::Schema {
            line: lineno,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn save_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    for r in records {
        r.validate()?;
    }
    let mut out = fs::File::create(path)?;
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

/// Full run configuration; a config file may override any subset of fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub decoder: DecoderConfig,
    pub loss: LossParams,
    pub pipeline: PipelineConfig,
    pub backend: HttpBackendConfig,
    /// Seed for the mock backend.
    pub mock_seed: u64,
    pub map_thresholds: Vec<f64>,
    pub acc_iou_thresholds: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            decoder: DecoderConfig::default(),
            loss: LossParams::default(),
            pipeline: PipelineConfig::default(),
            backend: HttpBackendConfig::default(),
            mock_seed: 42,
            map_thresholds: crate::eval::map_default_thresholds(),
            acc_iou_thresholds: vec![0.1, 0.2, 0.3, 0.4, 0.5],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// One clip's decoder inputs as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePack {
    pub video_id: String,
    pub duration: f64,
    pub features: FeatureSequence,
    pub reg: RegToken,
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureMeta {
    video_id: String,
    duration: f64,
    frame_times: Vec<f64>,
}

/// Write a clip's features and query token as a manifest + blob pair.
pub fn save_features(manifest_path: &Path, pack: &FeaturePack) -> Result<()> {
    pack.features.validate()?;
    let meta = serde_json::to_value(FeatureMeta {
        video_id: pack.video_id.clone(),
        duration: pack.duration,
        frame_times: pack.features.frame_times.clone(),
    })?;
    let f = &pack.features;
    let tensors = vec![
        RawTensor::new("features", vec![f.t, f.h, f.w, f.d], f.values.clone())?,
        RawTensor::new("reg_token", vec![pack.reg.dim()], pack.reg.values.clone())?,
    ];
    write_tensor_file(manifest_path, meta, &tensors)
}

pub fn load_features(manifest_path: &Path) -> Result<FeaturePack> {
    let (meta, tensors) = read_tensor_file(manifest_path)?;
    let meta: FeatureMeta =
        serde_json::from_value(meta).map_err(|e| Error::Config(format!("feature meta: {e}")))?;
    let find = |name: &str| {
        tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Tensor {
                name: name.into(),
                message: "missing".into(),
            })
    };
    let feat = find("features")?;
    if feat.shape.len() != 4 {
        return Err(Error::Tensor {
            name: "features".into(),
            message: format!("expected 4-d shape, found {:?}", feat.shape),
        });
    }
    let reg = find("reg_token")?;
    if reg.shape.len() != 1 {
        return Err(Error::Tensor {
            name: "reg_token".into(),
            message: format!("expected 1-d shape, found {:?}", reg.shape),
        });
    }
    let features = FeatureSequence::new(
        feat.shape[0],
        feat.shape[1],
        feat.shape[2],
        feat.shape[3],
        feat.data.clone(),
        meta.frame_times.clone(),
    )?;
    if reg.shape[0] != features.d {
        return Err(Error::Tensor {
            name: "reg_token".into(),
            message: format!("dim {} != feature dim {}", reg.shape[0], features.d),
        });
    }
    Ok(FeaturePack {
        video_id: meta.video_id,
        duration: meta.duration,
        features,
        reg: RegToken::new(reg.data.clone())?,
    })
}

/// Persist decoder weights with their configuration in the manifest meta.
pub fn save_decoder_weights(
    manifest_path: &Path,
    weights: &DecoderWeights,
    cfg: &DecoderConfig,
) -> Result<()> {
    weights.validate(cfg)?;
    let meta = serde_json::json!({ "decoder_config": cfg });
    let tensors: Vec<RawTensor> = weights
        .tensors()
        .into_iter()
        .map(|(name, arr)| {
            RawTensor::new(
                name,
                vec![arr.nrows(), arr.ncols()],
                arr.iter().cloned().collect(),
            )
        })
        .collect::<Result<_>>()?;
    write_tensor_file(manifest_path, meta, &tensors)
}

pub fn load_decoder_weights(manifest_path: &Path) -> Result<(DecoderWeights, DecoderConfig)> {
    let (meta, tensors) = read_tensor_file(manifest_path)?;
    let cfg: DecoderConfig = serde_json::from_value(
        meta.get("decoder_config")
            .cloned()
            .ok_or_else(|| Error::Config("weight manifest missing decoder_config".into()))?,
    )
    .map_err(|e| Error::Config(format!("decoder_config: {e}")))?;
    let mut weights = DecoderWeights::zeros(&cfg)?;
    let mut filled = 0usize;
    {
        let mut slots = weights.tensors_mut();
        for raw in &tensors {
            let slot = slots
                .iter_mut()
                .find(|(name, _)| *name == raw.name)
                .ok_or_else(|| Error::Tensor {
                    name: raw.name.clone(),
                    message: "unknown tensor for this config".into(),
                })?;
            if raw.shape.len() != 2 {
                return Err(Error::Tensor {
                    name: raw.name.clone(),
                    message: format!("expected 2-d shape, found {:?}", raw.shape),
                });
            }
            let arr = Array2::from_shape_vec((raw.shape[0], raw.shape[1]), raw.data.clone())
                .map_err(|e| Error::Tensor {
                    name: raw.name.clone(),
                    message: e.to_string(),
                })?;
            if slot.1.dim() != arr.dim() {
                return Err(Error::Tensor {
                    name: raw.name.clone(),
                    message: format!("expected shape {:?}, found {:?}", slot.1.dim(), arr.dim()),
                });
            }
            *slot.1 = arr;
            filled += 1;
        }
        if filled != slots.len() {
            return Err(Error::Config(format!(
                "weight file has {filled} tensors, config expects {}",
                slots.len()
            )));
        }
    }
    weights.validate(&cfg)?;
    Ok((weights, cfg))
}
