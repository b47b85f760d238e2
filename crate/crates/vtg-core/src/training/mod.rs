//! Loss functions, target assignment, gradient verification, and a toy
//! trainer that fits the decoder on synthetic separable data.

mod gradcheck;
mod toy;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::tape::{Tape, Var};
use crate::decoder::{pyramid_anchors, ForwardTrace, HeadVars};
use crate::error::{Error, Result};
use crate::types::Moment;

pub use gradcheck::{
    analytic_grads, finite_difference_grads, gradient_check, max_relative_error, GradCheckReport,
    GRAD_ABS_TOL,
};
pub use toy::{generate_toy_dataset, train_toy, ToyClip, ToyDataset, ToyTraining};

/// Score clamp applied before logarithms.
pub const SCORE_EPS: f64 = 1e-12;

/// Default cap on per-level offset targets during assignment.
pub const MAX_OFFSET_UNITS: f64 = 8.0;

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub lambda_con: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            lambda_cls: 5.0,
            lambda_reg: 1.0,
            lambda_con: 0.05,
            alpha: 0.9,
            gamma: 2.0,
            tau: 0.07,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.lambda_cls,
            self.lambda_reg,
            self.lambda_con,
            self.gamma,
            self.tau,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("loss parameters must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must be in (0,1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Supervision targets per pyramid position for one ground-truth moment.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    pub is_positive: Vec<bool>,
    /// (start, end) offset targets in level-stride units; `Some` at positives.
    pub offsets: Vec<Option<(f64, f64)>>,
    /// Position sampled for the contrastive term; `None` without positives.
    pub contrastive_index: Option<usize>,
}

impl TargetAssignment {
    pub fn len(&self) -> usize {
        self.is_positive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.is_positive.is_empty()
    }

    pub fn positive_indices(&self) -> Vec<usize> {
        self.is_positive
            .iter()
            .enumerate()
            .filter_map(|(i, &p)| p.then_some(i))
            .collect()
    }
}

/// Mark pyramid positions whose center falls inside `gt` as positive and
/// compute their boundary-offset targets in level-stride units.
///
/// A position also needs `max(b_s, b_e) <= max_offset_units` to stay
/// positive, bounding the regression range per level. One positive is
/// sampled uniformly for the contrastive term.
pub fn assign_targets<R: Rng + ?Sized>(
    gt: &Moment,
    duration: f64,
    t: usize,
    levels: usize,
    max_offset_units: f64,
    rng: &mut R,
) -> Result<TargetAssignment> {
    if !(duration > 0.0) {
        return Err(Error::Range(format!(
            "duration must be positive, got {duration}"
        )));
    }
    gt.validate()?;
    if !gt.within(duration) {
        return Err(Error::Range(format!(
            "gt [{}, {}] outside [0, {duration}]",
            gt.start, gt.end
        )));
    }
    if levels == 0 || t == 0 || t % (1 << (levels - 1)) != 0 {
        return Err(Error::Shape(format!(
            "T = {t} incompatible with {levels} pyramid levels"
        )));
    }
    let anchors = pyramid_anchors(t, levels);
    let frames_per_sec = t as f64 / duration;
    let gt_start_frames = gt.start * frames_per_sec;
    let gt_end_frames = gt.end * frames_per_sec;
    let mut is_positive = vec![false; anchors.len()];
    let mut offsets = vec![None; anchors.len()];
    for (i, anchor) in anchors.iter().enumerate() {
        let center = anchor.center_frames();
        if center < gt_start_frames || center > gt_end_frames {
            continue;
        }
        let stride = anchor.stride();
        let b_s = (center - gt_start_frames) / stride;
        let b_e = (gt_end_frames - center) / stride;
        if b_s.max(b_e) > max_offset_units {
            continue;
        }
        is_positive[i] = true;
        offsets[i] = Some((b_s, b_e));
    }
    let positives: Vec<usize> = is_positive
        .iter()
        .enumerate()
        .filter_map(|(i, &p)| p.then_some(i))
        .collect();
    let contrastive_index = if positives.is_empty() {
        None
    } else {
        Some(positives[rng.random_range(0..positives.len())])
    };
    Ok(TargetAssignment {
        is_positive,
        offsets,
        contrastive_index,
    })
}

/// Binary focal loss for one position, weighted by `lambda_cls`.
///
/// Positives: `-lambda*alpha*(1-c)^gamma*ln(c)`; negatives use the
/// complementary form with weight `1 - alpha`.
pub fn focal_loss(c_hat: f64, is_positive: bool, p: &LossParams) -> f64 {
    let c = c_hat.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
    if is_positive {
        p.lambda_cls * p.alpha * (1.0 - c).powf(p.gamma) * -c.ln()
    } else {
        p.lambda_cls * (1.0 - p.alpha) * c.powf(p.gamma) * -(1.0 - c).ln()
    }
}

/// L1 boundary loss for one positive position, weighted by `lambda_reg`.
pub fn regression_loss(pred: (f64, f64), target: (f64, f64), p: &LossParams) -> f64 {
    p.lambda_reg * ((target.0 - pred.0).abs() + (target.1 - pred.1).abs())
}

/// Contrastive alignment loss over frame-query similarities.
///
/// The denominator ranges over positions scoring strictly below the sampled
/// positive; when that set is empty the loss is exactly zero.
pub fn contrastive_loss(sims: &[f64], p_index: usize, p: &LossParams) -> f64 {
    let sp = sims[p_index];
    let below: Vec<f64> = sims.iter().copied().filter(|&s| sp > s).collect();
    if below.is_empty() {
        return 0.0;
    }
    let mut z: Vec<f64> = Vec::with_capacity(below.len() + 1);
    z.push(sp / p.tau);
    z.extend(below.iter().map(|s| s / p.tau));
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    p.lambda_con * (lse - sp / p.tau)
}

/// Per-term loss values; `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub focal: f64,
    pub regression: f64,
    pub contrastive: f64,
    /// Set when the assignment had no positive positions, which zeroes the
    /// regression and contrastive terms.
    pub no_positives: bool,
}

/// Mean focal over all pyramid positions, mean L1 over positives, plus the
/// contrastive term.
pub fn total_loss(
    trace: &ForwardTrace,
    ta: &TargetAssignment,
    p: &LossParams,
) -> Result<LossBreakdown> {
    p.validate()?;
    let l = trace.pyramid_len();
    if ta.len() != l {
        return Err(Error::Shape(format!(
            "assignment length {} != pyramid length {l}",
            ta.len()
        )));
    }
    let focal = trace
        .cls_scores
        .iter()
        .zip(&ta.is_positive)
        .map(|(&c, &pos)| focal_loss(c, pos, p))
        .sum::<f64>()
        / l as f64;
    let positives = ta.positive_indices();
    let no_positives = positives.is_empty();
    let regression = if no_positives {
        0.0
    } else {
        positives
            .iter()
            .map(|&i| regression_loss(trace.offsets[i], ta.offsets[i].expect("positive"), p))
            .sum::<f64>()
            / positives.len() as f64
    };
    let contrastive = match ta.contrastive_index {
        Some(idx) => contrastive_loss(&trace.frame_sims, idx, p),
        None => 0.0,
    };
    Ok(LossBreakdown {
        total: focal + regression + contrastive,
        focal,
        regression,
        contrastive,
        no_positives,
    })
}

/// Tape counterpart of [`total_loss`], for gradient computation. The set of
/// contrastive denominators is frozen from the current similarity values.
pub(crate) fn loss_on_tape(
    tape: &mut Tape,
    heads: &HeadVars,
    ta: &TargetAssignment,
    p: &LossParams,
) -> Var {
    let l = ta.len();
    assert_eq!(tape.value(heads.cls_scores).nrows(), l);

    // focal over all positions
    let pos_mask: Array2<f64> =
        Array2::from_shape_fn((l, 1), |(i, _)| if ta.is_positive[i] { 1.0 } else { 0.0 });
    let neg_mask = pos_mask.mapv(|v| 1.0 - v);
    let c = heads.cls_scores;
    let neg_c = tape.scale(c, -1.0);
    let one_minus_c = tape.add_scalar(neg_c, 1.0);
    let ln_c = tape.ln_clamped(c, SCORE_EPS);
    let pow_omc = tape.pow_const(one_minus_c, p.gamma);
    let pos_term = tape.mul(pow_omc, ln_c);
    let pos_term = tape.scale(pos_term, -p.lambda_cls * p.alpha);
    let pos_mask = tape.leaf(pos_mask);
    let pos_term = tape.mul(pos_term, pos_mask);
    let ln_omc = tape.ln_clamped(one_minus_c, SCORE_EPS);
    let pow_c = tape.pow_const(c, p.gamma);
    let neg_term = tape.mul(pow_c, ln_omc);
    let neg_term = tape.scale(neg_term, -p.lambda_cls * (1.0 - p.alpha));
    let neg_mask = tape.leaf(neg_mask);
    let neg_term = tape.mul(neg_term, neg_mask);
    let focal_vec = tape.add(pos_term, neg_term);
    let focal = tape.mean_all(focal_vec);

    // mean L1 over positives
    let positives = ta.positive_indices();
    let regression = if positives.is_empty() {
        tape.scalar_leaf(0.0)
    } else {
        let targets = Array2::from_shape_fn((positives.len(), 2), |(row, col)| {
            let (bs, be) = ta.offsets[positives[row]].expect("positive");
            if col == 0 {
                bs
            } else {
                be
            }
        });
        let preds = tape.gather_rows(heads.offsets, positives.clone());
        let targets = tape.leaf(targets);
        let diff = tape.sub(preds, targets);
        let absdiff = tape.abs(diff);
        let per_pos = tape.rowsum(absdiff);
        let mean = tape.mean_all(per_pos);
        tape.scale(mean, p.lambda_reg)
    };

    // contrastive with the below-positive set frozen from current values
    let contrastive = match ta.contrastive_index {
        None => tape.scalar_leaf(0.0),
        Some(idx) => {
            let sims = tape.value(heads.frame_sims);
            let sp = sims[(idx, 0)];
            let below: Vec<usize> = sims
                .column(0)
                .iter()
                .enumerate()
                .filter_map(|(i, &s)| (sp > s).then_some(i))
                .collect();
            if below.is_empty() {
                tape.scalar_leaf(0.0)
            } else {
                let mut gather = Vec::with_capacity(below.len() + 1);
                gather.push(idx);
                gather.extend(below);
                let z = tape.gather_rows(heads.frame_sims, gather);
                let z = tape.scale(z, 1.0 / p.tau);
                let z0 = tape.slice_rows(z, 0, 1);
                let lse = tape.lse_col(z);
                let diff = tape.sub(lse, z0);
                tape.scale(diff, p.lambda_con)
            }
        }
    };

    let fr = tape.add(focal, regression);
    tape.add(fr, contrastive)
}

/// The deterministic RNG used for sampling decisions (one per run/seed).
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
