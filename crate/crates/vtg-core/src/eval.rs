//! Grounding and QA metrics: recall at IoU/IoP thresholds, mean IoU/IoP,
//! grounded-QA accuracy, and multi-moment mean average precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{interval_iop, interval_iou};
use crate::types::Moment;

/// One evaluated sample: ranked predictions against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub video_id: String,
    /// Highest-ranked prediction (the head of `all_preds`).
    pub top1: Moment,
    /// Predictions in rank order (descending score).
    pub all_preds: Vec<Moment>,
    pub gt_moments: Vec<Moment>,
    pub answer_correct: Option<bool>,
}

impl EvalRecord {
    /// `all_preds` must already be in rank order; its head becomes `top1`.
    pub fn new(
        video_id: impl Into<String>,
        all_preds: Vec<Moment>,
        gt_moments: Vec<Moment>,
        answer_correct: Option<bool>,
    ) -> Result<Self> {
        let top1 = *all_preds
            .first()
            .ok_or_else(|| Error::Input("record needs at least one prediction".into()))?;
        Ok(EvalRecord {
            video_id: video_id.into(),
            top1,
            all_preds,
            gt_moments,
            answer_correct,
        })
    }
}

/// Which overlap measure a recall sweep uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverlapMeasure {
    Iou,
    /// Intersection over prediction.
    Iop,
}

fn overlap(measure: OverlapMeasure, pred: &Moment, gt: &Moment) -> f64 {
    match measure {
        OverlapMeasure::Iou => interval_iou(pred, gt),
        OverlapMeasure::Iop => interval_iop(pred, gt),
    }
}

/// Best overlap of a prediction against any ground-truth moment.
fn max_overlap(measure: OverlapMeasure, pred: &Moment, gts: &[Moment]) -> f64 {
    gts.iter()
        .map(|gt| overlap(measure, pred, gt))
        .fold(0.0, f64::max)
}

fn require_gt(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Input("no records to evaluate".into()));
    }
    if let Some(r) = records.iter().find(|r| r.gt_moments.is_empty()) {
        return Err(Error::Input(format!(
            "record {} has no ground-truth moments",
            r.video_id
        )));
    }
    Ok(())
}

fn recall_at(
    records: &[EvalRecord],
    thresholds: &[f64],
    measure: OverlapMeasure,
) -> Result<Vec<f64>> {
    require_gt(records)?;
    let tops: Vec<f64> = records
        .iter()
        .map(|r| max_overlap(measure, &r.top1, &r.gt_moments))
        .collect();
    Ok(thresholds
        .iter()
        .map(|&thr| tops.iter().filter(|&&v| v >= thr).count() as f64 / records.len() as f64)
        .collect())
}

/// Fraction of records whose top-1 IoU (max over gt) reaches each threshold.
pub fn recall_at_iou(records: &[EvalRecord], thresholds: &[f64]) -> Result<Vec<f64>> {
    recall_at(records, thresholds, OverlapMeasure::Iou)
}

/// Fraction of records whose top-1 IoP (max over gt) reaches each threshold.
pub fn recall_at_iop(records: &[EvalRecord], thresholds: &[f64]) -> Result<Vec<f64>> {
    recall_at(records, thresholds, OverlapMeasure::Iop)
}

/// Mean over records of the top-1 IoU, max over ground-truth moments.
pub fn mean_iou(records: &[EvalRecord]) -> Result<f64> {
    require_gt(records)?;
    Ok(records
        .iter()
        .map(|r| max_overlap(OverlapMeasure::Iou, &r.top1, &r.gt_moments))
        .sum::<f64>()
        / records.len() as f64)
}

/// Mean over records of the top-1 IoP, max over ground-truth moments.
pub fn mean_iop(records: &[EvalRecord]) -> Result<f64> {
    require_gt(records)?;
    Ok(records
        .iter()
        .map(|r| max_overlap(OverlapMeasure::Iop, &r.top1, &r.gt_moments))
        .sum::<f64>()
        / records.len() as f64)
}

/// Fraction answered correctly AND grounded with top-1 IoP at or above the
/// threshold. Every record must carry an answer verdict.
pub fn acc_at_gqa(records: &[EvalRecord], iop_threshold: f64) -> Result<f64> {
    require_gt(records)?;
    let mut hits = 0usize;
    for r in records {
        let correct = r.answer_correct.ok_or_else(|| {
            Error::Input(format!("record {} is missing answer_correct", r.video_id))
        })?;
        if correct && max_overlap(OverlapMeasure::Iop, &r.top1, &r.gt_moments) >= iop_threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Mean over thresholds of the fraction answered correctly AND grounded
/// with top-1 IoU at or above each threshold.
pub fn acc_at_iou_avg(records: &[EvalRecord], thresholds: &[f64]) -> Result<f64> {
    require_gt(records)?;
    if thresholds.is_empty() {
        return Err(Error::Input("acc@IoU needs at least one threshold".into()));
    }
    let mut verdicts = Vec::with_capacity(records.len());
    for r in records {
        let correct = r.answer_correct.ok_or_else(|| {
            Error::Input(format!("record {} is missing answer_correct", r.video_id))
        })?;
        verdicts.push((
            correct,
            max_overlap(OverlapMeasure::Iou, &r.top1, &r.gt_moments),
        ));
    }
    let mut acc = 0.0;
    for &thr in thresholds {
        let hits = verdicts.iter().filter(|(c, v)| *c && *v >= thr).count();
        acc += hits as f64 / records.len() as f64;
    }
    Ok(acc / thresholds.len() as f64)
}

/// The default mAP threshold sweep 0.5:0.05:0.95.
pub fn map_default_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Per-threshold average precision and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub per_threshold: Vec<(f64, f64)>,
    pub mean: f64,
}

/// Rank order used for matching and for the pooled ranking: score
/// descending, ties by earlier start then insertion index.
fn ranked(preds: &[Moment]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        let sa = preds[a].score.unwrap_or(0.0);
        let sb = preds[b].score.unwrap_or(0.0);
        sb.partial_cmp(&sa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(
                preds[a]
                    .start
                    .partial_cmp(&preds[b].start)
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
            .then(a.cmp(&b))
    });
    order
}

/// Greedy per-record matching at one IoU threshold: predictions in rank
/// order claim their best still-unmatched gt. Returns (score, is_tp) pairs.
fn match_record(record: &EvalRecord, threshold: f64) -> Vec<(f64, bool)> {
    let mut gt_taken = vec![false; record.gt_moments.len()];
    let order = ranked(&record.all_preds);
    let mut out = Vec::with_capacity(order.len());
    for &pi in &order {
        let pred = &record.all_preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in record.gt_moments.iter().enumerate() {
            if gt_taken[gi] {
                continue;
            }
            let iou = interval_iou(pred, gt);
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        let tp = if let Some((gi, _)) = best {
            gt_taken[gi] = true;
            true
        } else {
            false
        };
        out.push((pred.score.unwrap_or(0.0), tp));
    }
    out
}

/// All-point interpolated average precision from a pooled ranking.
fn average_precision(mut pooled: Vec<(f64, usize, bool)>, total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    // (score, stable pool index, tp): rank by score desc, stable by index
    pooled.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    let n = pooled.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (rank, (_, _, is_tp)) in pooled.iter().enumerate() {
        if *is_tp {
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    // interpolate: precision at recall r is the max precision at recall >= r
    let mut interp = precision.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        interp[i] = interp[i].max(interp[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..n {
        if recall[i] > prev_recall {
            ap += (recall[i] - prev_recall) * interp[i];
            prev_recall = recall[i];
        }
    }
    ap
}

/// Multi-moment mean average precision over an IoU threshold sweep.
///
/// Per threshold: greedy score-ordered matching of each record's predictions
/// to its unmatched gt moments, then all-point interpolated AP over the
/// ranking pooled across records.
pub fn multi_moment_map(records: &[EvalRecord], thresholds: &[f64]) -> Result<MapReport> {
    require_gt(records)?;
    if thresholds.is_empty() {
        return Err(Error::Input("mAP needs at least one threshold".into()));
    }
    let total_gt: usize = records.iter().map(|r| r.gt_moments.len()).sum();
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let mut pooled = Vec::new();
        for record in records {
            for (score, tp) in match_record(record, thr) {
                pooled.push((score, pooled.len(), tp));
            }
        }
        per_threshold.push((thr, average_precision(pooled, total_gt)));
    }
    let mean = per_threshold.iter().map(|(_, ap)| ap).sum::<f64>() / thresholds.len() as f64;
    Ok(MapReport {
        per_threshold,
        mean,
    })
}

/// Aggregated metrics of one evaluation run, serializable to JSON and
/// renderable as an aligned table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    pub n_records: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recall_iou: Option<Vec<(f64, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_iop: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acc_gqa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map: Option<MapReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acc_iou: Option<f64>,
}

impl MetricsReport {
    /// Two aligned columns: metric name, value.
    pub fn text_table(&self) -> String {
        let mut rows: Vec<(String, String)> =
            vec![("records".to_string(), self.n_records.to_string())];
        if let Some(recalls) = &self.recall_iou {
            for (thr, v) in recalls {
                rows.push((format!("R@{thr:.2}"), format!("{v:.4}")));
            }
        }
        if let Some(v) = self.mean_iou {
            rows.push(("mIoU".to_string(), format!("{v:.4}")));
        }
        if let Some(v) = self.mean_iop {
            rows.push(("mIoP".to_string(), format!("{v:.4}")));
        }
        if let Some(v) = self.acc_gqa {
            rows.push(("Acc@GQA".to_string(), format!("{v:.4}")));
        }
        if let Some(map) = &self.map {
            for (thr, ap) in &map.per_threshold {
                rows.push((format!("AP@{thr:.2}"), format!("{ap:.4}")));
            }
            rows.push(("mAP".to_string(), format!("{:.4}", map.mean)));
        }
        if let Some(v) = self.acc_iou {
            rows.push(("acc.@IoU".to_string(), format!("{v:.4}")));
        }
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.into_iter()
            .map(|(k, v)| format!("{k:<width$}  {v}"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}
