//! The timestamp decoder: a deterministic forward pass from frame features
//! and a query token to pyramid-level frame scores and boundary offsets, and
//! their decoding into scored candidate moments.
//!
//! The numeric path is built on the autodiff [`tape`], so the same forward
//! code serves inference, loss evaluation, and gradient computation.

pub mod tape;
mod weights;

use ndarray::{Array2, Axis};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::moments::{nms, top_k};
use crate::types::{clamp_moment, FeatureSequence, Moment, RegToken};

pub(crate) use weights::WeightVars;
pub use weights::{
    ConvHead, DecoderConfig, DecoderWeights, EncoderLayerWeights, LayerNormParams, LinearMap,
    PyramidBlock,
};

use tape::{Tape, Var};

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-24;

/// Position bookkeeping for one pyramid slot: which level and which index
/// within that level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Anchor {
    pub level: usize,
    pub index: usize,
}

impl Anchor {
    /// Frames covered by one step at this level.
    pub fn stride(&self) -> f64 {
        (1usize << self.level) as f64
    }

    /// Position center in frame units.
    pub fn center_frames(&self) -> f64 {
        (self.index as f64 + 0.5) * self.stride()
    }
}

/// Anchors for all pyramid positions of a `T`-frame clip, level-major.
pub fn pyramid_anchors(t: usize, levels: usize) -> Vec<Anchor> {
    let mut anchors = Vec::with_capacity(pyramid_len(t, levels));
    for level in 0..levels {
        for index in 0..(t >> level) {
            anchors.push(Anchor { level, index });
        }
    }
    anchors
}

/// Total pyramid length `sum over levels of T / 2^level`.
pub fn pyramid_len(t: usize, levels: usize) -> usize {
    (0..levels).map(|l| t >> l).sum()
}

/// Mean over the `H*W` spatial tokens of every frame: `T x (H*W*D) -> T x D`.
pub fn avg_pool_frames(f: &FeatureSequence) -> Array2<f64> {
    let tokens = f.h * f.w;
    let mut out = Array2::zeros((f.t, f.d));
    for t in 0..f.t {
        let frame = f.frame(t);
        for tok in 0..tokens {
            for k in 0..f.d {
                out[(t, k)] += frame[tok * f.d + k];
            }
        }
        out.row_mut(t).mapv_inplace(|v| v / tokens as f64);
    }
    out
}

/// Sin/cos positional encoding of one frame index.
///
/// Positions are frame indices relative to clip start: the normalized
/// position `t_index / t_total` rescaled by `t_total`, i.e. the integer
/// index itself. Even dims carry `sin`, odd dims `cos`.
pub fn sinusoidal_pe(t_index: usize, t_total: usize, d: usize, base: f64) -> Vec<f64> {
    debug_assert!(t_index < t_total);
    let pos = (t_index as f64 / t_total as f64) * t_total as f64;
    (0..d)
        .map(|i| {
            let pair = (i / 2) as f64;
            let angle = pos / base.powf(2.0 * pair / d as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

fn pe_matrix(t: usize, d: usize, base: f64) -> Array2<f64> {
    let mut out = Array2::zeros((t, d));
    for idx in 0..t {
        let row = sinusoidal_pe(idx, t, d, base);
        out.row_mut(idx)
            .iter_mut()
            .zip(row)
            .for_each(|(dst, v)| *dst = v);
    }
    out
}

fn linear(tape: &mut Tape, x: Var, w: &WeightVars, name: &str) -> Var {
    let weight = w.get(&format!("{name}.weight"));
    let bias = w.get(&format!("{name}.bias"));
    let y = tape.matmul(x, weight);
    tape.add_row(y, bias)
}

fn layer_norm(tape: &mut Tape, x: Var, w: &WeightVars, name: &str) -> Var {
    let gain = w.get(&format!("{name}.gain"));
    let bias = w.get(&format!("{name}.bias"));
    let y = tape.row_normalize(x, LN_EPS);
    let y = tape.mul_row(y, gain);
    tape.add_row(y, bias)
}

fn attention(tape: &mut Tape, x: Var, w: &WeightVars, layer: usize, cfg: &DecoderConfig) -> Var {
    let p = |n: &str| format!("layers.{layer}.{n}");
    let q = linear(tape, x, w, &p("attn_q"));
    let k = linear(tape, x, w, &p("attn_k"));
    let v = linear(tape, x, w, &p("attn_v"));
    let dk = cfg.d_model / cfg.n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut merged: Option<Var> = None;
    for h in 0..cfg.n_heads {
        let (c0, c1) = (h * dk, (h + 1) * dk);
        let qh = tape.slice_cols(q, c0, c1);
        let kh = tape.slice_cols(k, c0, c1);
        let vh = tape.slice_cols(v, c0, c1);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        let oh = tape.matmul(attn, vh);
        merged = Some(match merged {
            None => oh,
            Some(acc) => tape.concat_cols(acc, oh),
        });
    }
    linear(tape, merged.expect("n_heads >= 1"), w, &p("attn_out"))
}

fn encoder_layer(
    tape: &mut Tape,
    x: Var,
    w: &WeightVars,
    layer: usize,
    cfg: &DecoderConfig,
) -> Var {
    let p = |n: &str| format!("layers.{layer}.{n}");
    let attn = attention(tape, x, w, layer, cfg);
    let x = tape.add(x, attn);
    let x = layer_norm(tape, x, w, &p("norm1"));
    let hidden = linear(tape, x, w, &p("ffn1"));
    let hidden = tape.gelu(hidden);
    let ffn = linear(tape, hidden, w, &p("ffn2"));
    let x2 = tape.add(x, ffn);
    layer_norm(tape, x2, w, &p("norm2"))
}

pub(crate) struct FusionVars {
    pub embedded_v: Var,
    pub embedded_r: Var,
    pub fused_v: Var,
    pub fused_r: Var,
}

/// Projection, modality indicators, positional encoding, and the
/// bidirectional encoder over the `(T+1)`-token sequence.
pub(crate) fn fuse_on_tape(
    tape: &mut Tape,
    pooled: Var,
    reg: Var,
    w: &WeightVars,
    cfg: &DecoderConfig,
) -> FusionVars {
    let t = tape.value(pooled).nrows();
    let embedded_v = linear(tape, pooled, w, "proj_v");
    let embedded_r = linear(tape, reg, w, "proj_r");
    let pe = pe_matrix(t, cfg.d_model, cfg.pe_base);
    let pe = tape.leaf(pe);
    let mod_v = w.get("mod_v");
    let mod_r = w.get("mod_r");
    let v_in = tape.add_row(embedded_v, mod_v);
    let v_in = tape.add(v_in, pe);
    let r_in = tape.add_row(embedded_r, mod_r);
    let mut x = tape.concat_rows(v_in, r_in);
    for layer in 0..cfg.n_layers {
        x = encoder_layer(tape, x, w, layer, cfg);
    }
    let fused_v = tape.slice_rows(x, 0, t);
    let fused_r = tape.slice_rows(x, t, t + 1);
    FusionVars {
        embedded_v,
        embedded_r,
        fused_v,
        fused_r,
    }
}

/// Stride-2 halving: `SiLU(LayerNorm(Conv1D_{k=2,s=2}(x)))`.
fn downsample(tape: &mut Tape, x: Var, w: &WeightVars, block: usize) -> Var {
    let t = tape.value(x).nrows();
    debug_assert_eq!(t % 2, 0);
    let even: Vec<usize> = (0..t / 2).map(|i| 2 * i).collect();
    let odd: Vec<usize> = (0..t / 2).map(|i| 2 * i + 1).collect();
    let e = tape.gather_rows(x, even);
    let o = tape.gather_rows(x, odd);
    let pairs = tape.concat_cols(e, o);
    let y = linear(tape, pairs, w, &format!("pyramid.{block}.conv"));
    let y = layer_norm(tape, y, w, &format!("pyramid.{block}.norm"));
    tape.silu(y)
}

/// Per-level sequences; level 0 is the fused visual sequence itself.
pub(crate) fn pyramid_on_tape(
    tape: &mut Tape,
    fused_v: Var,
    w: &WeightVars,
    cfg: &DecoderConfig,
) -> Vec<Var> {
    let mut levels = vec![fused_v];
    for block in 0..cfg.pyramid_levels - 1 {
        let next = downsample(tape, levels[block], w, block);
        levels.push(next);
    }
    levels
}

fn concat_all(tape: &mut Tape, parts: &[Var]) -> Var {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.concat_rows(acc, p);
    }
    acc
}

/// Kernel-3 conv with replicate padding, flattened to a matmul.
fn conv3(tape: &mut Tape, x: Var, w: &WeightVars, name: &str) -> Var {
    let t = tape.value(x).nrows();
    let left: Vec<usize> = (0..t).map(|i| i.saturating_sub(1)).collect();
    let right: Vec<usize> = (0..t).map(|i| (i + 1).min(t - 1)).collect();
    let l = tape.gather_rows(x, left);
    let r = tape.gather_rows(x, right);
    let lm = tape.concat_cols(l, x);
    let lmr = tape.concat_cols(lm, r);
    let weight = w.get(&format!("{name}.weight"));
    let bias = w.get(&format!("{name}.bias"));
    let y = tape.matmul(lmr, weight);
    tape.add_row(y, bias)
}

fn head_stack(tape: &mut Tape, x: Var, w: &WeightVars, head: &str) -> Var {
    let h = conv3(tape, x, w, &format!("{head}.conv1"));
    let h = tape.silu(h);
    conv3(tape, h, w, &format!("{head}.conv2"))
}

pub(crate) struct HeadVars {
    pub cls_scores: Var,
    pub offsets: Var,
    pub frame_sims: Var,
}

/// Classification scores, exp-activated scaled offsets, and cosine
/// similarities against the fused query token, per pyramid position.
pub(crate) fn heads_on_tape(
    tape: &mut Tape,
    levels: &[Var],
    fused_r: Var,
    w: &WeightVars,
) -> HeadVars {
    let level_scales = w.get("level_scales");
    let mut cls_parts = Vec::with_capacity(levels.len());
    let mut off_parts = Vec::with_capacity(levels.len());
    for (l, &seq) in levels.iter().enumerate() {
        let cls_raw = head_stack(tape, seq, w, "cls_head");
        cls_parts.push(tape.sigmoid(cls_raw));
        let reg_raw = head_stack(tape, seq, w, "reg_head");
        let reg_exp = tape.exp(reg_raw);
        let scale = tape.slice_cols(level_scales, l, l + 1);
        off_parts.push(tape.mul_scalar_node(reg_exp, scale));
    }
    let cls_scores = concat_all(tape, &cls_parts);
    let offsets = concat_all(tape, &off_parts);

    let pyramid = concat_all(tape, levels);
    let rt = tape.transpose(fused_r);
    let dots = tape.matmul(pyramid, rt);
    let p_sq = tape.mul(pyramid, pyramid);
    let p_sq = tape.rowsum(p_sq);
    let p_norm = tape.sqrt_eps(p_sq, NORM_EPS);
    let inv_p = tape.recip(p_norm);
    let r_sq = tape.mul(fused_r, fused_r);
    let r_sq = tape.rowsum(r_sq);
    let r_norm = tape.sqrt_eps(r_sq, NORM_EPS);
    let inv_r = tape.recip(r_norm);
    let sims = tape.mul(dots, inv_p);
    let frame_sims = tape.mul_scalar_node(sims, inv_r);
    HeadVars {
        cls_scores,
        offsets,
        frame_sims,
    }
}

pub(crate) struct TraceVars {
    pub fusion: FusionVars,
    pub pyramid: Var,
    pub heads: HeadVars,
}

/// Full decoder forward on an existing tape.
pub(crate) fn forward_on_tape(
    tape: &mut Tape,
    pooled: Array2<f64>,
    reg_row: Array2<f64>,
    w: &WeightVars,
    cfg: &DecoderConfig,
) -> TraceVars {
    let pooled = tape.leaf(pooled);
    let reg = tape.leaf(reg_row);
    let fusion = fuse_on_tape(tape, pooled, reg, w, cfg);
    let levels = pyramid_on_tape(tape, fusion.fused_v, w, cfg);
    let pyramid = concat_all(tape, &levels);
    let heads = heads_on_tape(tape, &levels, fusion.fused_r, w);
    TraceVars {
        fusion,
        pyramid,
        heads,
    }
}

/// Complete record of one decoder forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Frame features after spatial pooling, `T x d_input`.
    pub pooled: Array2<f64>,
    /// Projected frame embeddings, `T x d_model`.
    pub embedded_v: Array2<f64>,
    /// Projected query embedding, `1 x d_model`.
    pub embedded_r: Array2<f64>,
    /// Contextualized frame embeddings, `T x d_model`.
    pub fused_v: Array2<f64>,
    /// Contextualized query embedding, `1 x d_model`.
    pub fused_r: Array2<f64>,
    /// Concatenated pyramid features, `L x d_model`.
    pub pyramid: Array2<f64>,
    /// Foreground confidence per pyramid position, each in `(0, 1)`.
    pub cls_scores: Vec<f64>,
    /// Positive (start, end) boundary offsets in level-stride frame units.
    pub offsets: Vec<(f64, f64)>,
    /// Cosine similarity of each pyramid position against the fused query.
    pub frame_sims: Vec<f64>,
    pub anchors: Vec<Anchor>,
    /// Frame count of the clip.
    pub t: usize,
}

impl ForwardTrace {
    pub fn pyramid_len(&self) -> usize {
        self.anchors.len()
    }

    /// SHA-256 over the little-endian bytes of every field, for golden tests.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.t as u64).to_le_bytes());
        for a in &self.anchors {
            hasher.update((a.level as u64).to_le_bytes());
            hasher.update((a.index as u64).to_le_bytes());
        }
        let arrays = [
            &self.pooled,
            &self.embedded_v,
            &self.embedded_r,
            &self.fused_v,
            &self.fused_r,
            &self.pyramid,
        ];
        for arr in arrays {
            for v in arr.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        for &v in &self.cls_scores {
            hasher.update(v.to_le_bytes());
        }
        for &(s, e) in &self.offsets {
            hasher.update(s.to_le_bytes());
            hasher.update(e.to_le_bytes());
        }
        for &v in &self.frame_sims {
            hasher.update(v.to_le_bytes());
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn validate_inputs(
    f: &FeatureSequence,
    reg: &RegToken,
    w: &DecoderWeights,
    cfg: &DecoderConfig,
) -> Result<()> {
    cfg.validate()?;
    f.validate()?;
    cfg.check_t(f.t)?;
    if f.d != cfg.d_input {
        return Err(Error::Shape(format!(
            "feature dim {} != configured d_input {}",
            f.d, cfg.d_input
        )));
    }
    if reg.dim() != cfg.d_input {
        return Err(Error::Shape(format!(
            "reg token dim {} != configured d_input {}",
            reg.dim(),
            cfg.d_input
        )));
    }
    if reg.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("reg token must be finite".into()));
    }
    w.validate(cfg)?;
    Ok(())
}

fn reg_row(reg: &RegToken) -> Array2<f64> {
    Array2::from_shape_vec((1, reg.values.len()), reg.values.clone()).expect("reg token row")
}

/// Run the full decoder: pooling, fusion, pyramid, and prediction heads.
pub fn forward(
    f: &FeatureSequence,
    reg: &RegToken,
    w: &DecoderWeights,
    cfg: &DecoderConfig,
) -> Result<ForwardTrace> {
    validate_inputs(f, reg, w, cfg)?;
    let pooled = avg_pool_frames(f);
    let mut tape = Tape::new();
    let wv = w.stage(&mut tape);
    let tv = forward_on_tape(&mut tape, pooled.clone(), reg_row(reg), &wv, cfg);
    Ok(extract_trace(&tape, &tv, pooled, f.t, cfg))
}

pub(crate) fn extract_trace(
    tape: &Tape,
    tv: &TraceVars,
    pooled: Array2<f64>,
    t: usize,
    cfg: &DecoderConfig,
) -> ForwardTrace {
    let offsets_arr = tape.value(tv.heads.offsets);
    let offsets = offsets_arr
        .rows()
        .into_iter()
        .map(|r| (r[0], r[1]))
        .collect();
    ForwardTrace {
        pooled,
        embedded_v: tape.value(tv.fusion.embedded_v).clone(),
        embedded_r: tape.value(tv.fusion.embedded_r).clone(),
        fused_v: tape.value(tv.fusion.fused_v).clone(),
        fused_r: tape.value(tv.fusion.fused_r).clone(),
        pyramid: tape.value(tv.pyramid).clone(),
        cls_scores: tape.value(tv.heads.cls_scores).iter().cloned().collect(),
        offsets,
        frame_sims: tape.value(tv.heads.frame_sims).iter().cloned().collect(),
        anchors: pyramid_anchors(t, cfg.pyramid_levels),
        t,
    }
}

/// Result of [`fuse`]: the forward pass up to the contextualized embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionTrace {
    pub pooled: Array2<f64>,
    pub embedded_v: Array2<f64>,
    pub embedded_r: Array2<f64>,
    pub fused_v: Array2<f64>,
    pub fused_r: Array2<f64>,
}

/// Pooling, projection, and transformer fusion only.
pub fn fuse(
    f: &FeatureSequence,
    reg: &RegToken,
    w: &DecoderWeights,
    cfg: &DecoderConfig,
) -> Result<FusionTrace> {
    validate_inputs(f, reg, w, cfg)?;
    let pooled = avg_pool_frames(f);
    let mut tape = Tape::new();
    let wv = w.stage(&mut tape);
    let pooled_var = tape.leaf(pooled.clone());
    let reg_var = tape.leaf(reg_row(reg));
    let fv = fuse_on_tape(&mut tape, pooled_var, reg_var, &wv, cfg);
    Ok(FusionTrace {
        pooled,
        embedded_v: tape.value(fv.embedded_v).clone(),
        embedded_r: tape.value(fv.embedded_r).clone(),
        fused_v: tape.value(fv.fused_v).clone(),
        fused_r: tape.value(fv.fused_r).clone(),
    })
}

/// Multi-scale features with per-position anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidFeatures {
    pub levels: Vec<Array2<f64>>,
    pub anchors: Vec<Anchor>,
}

impl PyramidFeatures {
    /// Assemble from per-level sequences (level `l` must halve level `l-1`).
    pub fn from_levels(levels: Vec<Array2<f64>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Shape("pyramid needs at least one level".into()));
        }
        let d = levels[0].ncols();
        let mut anchors = Vec::new();
        for (l, seq) in levels.iter().enumerate() {
            if seq.ncols() != d {
                return Err(Error::Shape("pyramid levels must share one width".into()));
            }
            for index in 0..seq.nrows() {
                anchors.push(Anchor { level: l, index });
            }
        }
        Ok(PyramidFeatures { levels, anchors })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn concat(&self) -> Array2<f64> {
        let views: Vec<_> = self.levels.iter().map(|l| l.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("consistent widths")
    }
}

/// Build the temporal feature pyramid from contextualized frame embeddings.
pub fn build_pyramid(
    fused_v: &Array2<f64>,
    w: &DecoderWeights,
    cfg: &DecoderConfig,
) -> Result<PyramidFeatures> {
    cfg.validate()?;
    cfg.check_t(fused_v.nrows())?;
    if fused_v.ncols() != cfg.d_model {
        return Err(Error::Shape(format!(
            "fused width {} != d_model {}",
            fused_v.ncols(),
            cfg.d_model
        )));
    }
    let mut tape = Tape::new();
    let wv = w.stage(&mut tape);
    let x = tape.leaf(fused_v.clone());
    let levels = pyramid_on_tape(&mut tape, x, &wv, cfg);
    PyramidFeatures::from_levels(levels.iter().map(|&v| tape.value(v).clone()).collect())
}

/// Head outputs over a pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub cls_scores: Vec<f64>,
    pub offsets: Vec<(f64, f64)>,
    pub frame_sims: Vec<f64>,
}

/// Apply the classification and regression heads plus query similarities.
pub fn predict_heads(
    pyramid: &PyramidFeatures,
    fused_r: &Array2<f64>,
    w: &DecoderWeights,
    cfg: &DecoderConfig,
) -> Result<HeadOutputs> {
    cfg.validate()?;
    if pyramid.levels.len() != cfg.pyramid_levels {
        return Err(Error::Shape(format!(
            "pyramid has {} levels, config wants {}",
            pyramid.levels.len(),
            cfg.pyramid_levels
        )));
    }
    let mut tape = Tape::new();
    let wv = w.stage(&mut tape);
    let level_vars: Vec<Var> = pyramid
        .levels
        .iter()
        .map(|l| tape.leaf(l.clone()))
        .collect();
    let r = tape.leaf(fused_r.clone());
    let hv = heads_on_tape(&mut tape, &level_vars, r, &wv);
    Ok(HeadOutputs {
        cls_scores: tape.value(hv.cls_scores).iter().cloned().collect(),
        offsets: tape
            .value(hv.offsets)
            .rows()
            .into_iter()
            .map(|row| (row[0], row[1]))
            .collect(),
        frame_sims: tape.value(hv.frame_sims).iter().cloned().collect(),
    })
}

/// Turn a forward trace into scored, suppressed, top-k candidate moments.
///
/// Position `(l, j)` has center `(j + 0.5) * 2^l` frame units; offsets are in
/// level-stride units. Frame coordinates are normalized by `T`, mapped to
/// seconds via `duration`, and clamped.
pub fn decode_candidates(
    trace: &ForwardTrace,
    duration: f64,
    k: usize,
    nms_iou: f64,
) -> Result<Vec<Moment>> {
    if !(duration > 0.0) {
        return Err(Error::Range(format!(
            "duration must be positive, got {duration}"
        )));
    }
    let n = trace.anchors.len();
    if trace.offsets.len() != n || trace.cls_scores.len() != n {
        return Err(Error::Shape(format!(
            "trace fields disagree: {} anchors, {} offsets, {} scores",
            n,
            trace.offsets.len(),
            trace.cls_scores.len()
        )));
    }
    let t = trace.t as f64;
    let mut cands = Vec::with_capacity(n);
    for (i, anchor) in trace.anchors.iter().enumerate() {
        let stride = anchor.stride();
        let center = anchor.center_frames();
        let (bs, be) = trace.offsets[i];
        let start = (center - bs * stride) / t * duration;
        let end = (center + be * stride) / t * duration;
        let raw = Moment {
            start,
            end,
            score: Some(trace.cls_scores[i].clamp(0.0, 1.0)),
        };
        cands.push(clamp_moment(&raw, duration));
    }
    Ok(top_k(&nms(&cands, nms_iou), k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::DEFAULT_NMS_IOU;

    fn features(t: usize, d: usize, fill: impl Fn(usize, usize) -> f64) -> FeatureSequence {
        let mut values = Vec::with_capacity(t * d);
        for ti in 0..t {
            for k in 0..d {
                values.push(fill(ti, k));
            }
        }
        FeatureSequence::new(t, 1, 1, d, values, (0..t).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn avg_pool_identity_when_single_token() {
        let f = features(4, 3, |t, k| (t * 3 + k) as f64);
        let pooled = avg_pool_frames(&f);
        assert_eq!(pooled.dim(), (4, 3));
        assert_eq!(pooled[(2, 1)], 7.0);
    }

    #[test]
    fn avg_pool_means_spatial_tokens() {
        // two tokens [1], [3] in one frame, d = 1
        let f = FeatureSequence::new(1, 2, 1, 1, vec![1.0, 3.0], vec![0.0]).unwrap();
        let pooled = avg_pool_frames(&f);
        assert_eq!(pooled[(0, 0)], 2.0);
        let z = FeatureSequence::new(2, 2, 2, 3, vec![0.0; 24], vec![0.0, 1.0]).unwrap();
        assert!(avg_pool_frames(&z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pe_index_zero_alternates() {
        let pe = sinusoidal_pe(0, 16, 8, 10000.0);
        for (i, v) in pe.iter().enumerate() {
            let expect = if i % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(*v, expect);
        }
    }

    #[test]
    fn pe_range_and_distinctness() {
        for idx in 0..16 {
            let pe = sinusoidal_pe(idx, 16, 8, 10000.0);
            assert!(pe.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        let a = sinusoidal_pe(3, 16, 8, 10000.0);
        let b = sinusoidal_pe(11, 16, 8, 10000.0);
        assert_ne!(a, b);
    }

    #[test]
    fn fuse_shape_contract() {
        let cfg = DecoderConfig::tiny();
        let w = DecoderWeights::init(&cfg, 42).unwrap();
        let f = features(8, cfg.d_input, |t, k| ((t + k) as f64 * 0.1).sin());
        let reg = RegToken::new(vec![0.3; cfg.d_input]).unwrap();
        let out = fuse(&f, &reg, &w, &cfg).unwrap();
        assert_eq!(out.fused_v.dim(), (8, cfg.d_model));
        assert_eq!(out.fused_r.dim(), (1, cfg.d_model));
        assert_eq!(out.embedded_v.dim(), (8, cfg.d_model));
        assert_eq!(out.embedded_r.dim(), (1, cfg.d_model));
    }

    #[test]
    fn fuse_zero_weights_finite_and_deterministic() {
        let cfg = DecoderConfig::tiny();
        let w = DecoderWeights::zeros(&cfg).unwrap();
        let f = features(8, cfg.d_input, |t, k| (t as f64) - (k as f64) * 0.5);
        let reg = RegToken::new(vec![1.0; cfg.d_input]).unwrap();
        let a = fuse(&f, &reg, &w, &cfg).unwrap();
        let b = fuse(&f, &reg, &w, &cfg).unwrap();
        assert!(a.fused_v.iter().all(|v| v.is_finite()));
        assert!(a.fused_r.iter().all(|v| v.is_finite()));
        assert_eq!(a, b);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let cfg = DecoderConfig::tiny();
        let w = DecoderWeights::init(&cfg, 42).unwrap();
        let f = features(8, cfg.d_input, |t, k| ((t * 7 + k * 3) as f64 * 0.05).cos());
        let reg =
            RegToken::new((0..cfg.d_input).map(|i| (i as f64 * 0.2).sin()).collect()).unwrap();
        let a = forward(&f, &reg, &w, &cfg).unwrap();
        let b = forward(&f, &reg, &w, &cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a, b);
    }

    #[test]
    fn pyramid_lengths() {
        let cfg = DecoderConfig::tiny();
        let w = DecoderWeights::init(&cfg, 1).unwrap();
        let fused = Array2::from_shape_fn((16, cfg.d_model), |(i, j)| ((i + j) as f64).sin());
        let pyr = build_pyramid(&fused, &w, &cfg).unwrap();
        assert_eq!(pyr.len(), 30);
        assert_eq!(
            pyr.levels.iter().map(|l| l.nrows()).collect::<Vec<_>>(),
            vec![16, 8, 4, 2]
        );

        let one = DecoderConfig {
            pyramid_levels: 1,
            ..DecoderConfig::tiny()
        };
        let w1 = DecoderWeights::init(&one, 1).unwrap();
        let fused8 = Array2::from_shape_fn((8, one.d_model), |(i, j)| (i * j) as f64 * 0.01);
        let pyr1 = build_pyramid(&fused8, &w1, &one).unwrap();
        assert_eq!(pyr1.len(), 8);
        assert_eq!(pyr1.levels[0], fused8);

        let pyr4 = build_pyramid(
            &Array2::from_shape_fn((8, cfg.d_model), |(i, j)| ((i * 3 + j) as f64).cos()),
            &w,
            &cfg,
        )
        .unwrap();
        assert_eq!(
            pyr4.levels.iter().map(|l| l.nrows()).collect::<Vec<_>>(),
            vec![8, 4, 2, 1]
        );
        assert_eq!(pyramid_len(8, 4), 15);
    }

    #[test]
    fn pyramid_rejects_indivisible_t() {
        let cfg = DecoderConfig::tiny();
        let w = DecoderWeights::init(&cfg, 1).unwrap();
        let fused = Array2::zeros((12, cfg.d_model));
        assert!(matches!(
            build_pyramid(&fused, &w, &cfg),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn heads_ranges() {
        let cfg = DecoderConfig::tiny();
        let w = DecoderWeights::init(&cfg, 3).unwrap();
        let f = features(16, cfg.d_input, |t, k| {
            ((t as f64) * 0.3 - k as f64 * 0.1).tanh()
        });
        let reg = RegToken::new(vec![0.5; cfg.d_input]).unwrap();
        let trace = forward(&f, &reg, &w, &cfg).unwrap();
        assert_eq!(trace.pyramid_len(), 30);
        assert!(trace.cls_scores.iter().all(|&c| c > 0.0 && c < 1.0));
        assert!(trace.offsets.iter().all(|&(s, e)| s > 0.0 && e > 0.0));
        assert!(trace
            .frame_sims
            .iter()
            .all(|&s| (-1.0 - 1e-9..=1.0 + 1e-9).contains(&s)));
    }

    #[test]
    fn heads_constant_rows_give_constant_scores() {
        let cfg = DecoderConfig::tiny();
        let w = DecoderWeights::init(&cfg, 5).unwrap();
        let row: Vec<f64> = (0..cfg.d_model).map(|i| (i as f64 * 0.37).sin()).collect();
        let levels: Vec<Array2<f64>> = [8usize, 4, 2, 1]
            .iter()
            .map(|&t| Array2::from_shape_fn((t, cfg.d_model), |(_, j)| row[j]))
            .collect();
        let pyr = PyramidFeatures::from_levels(levels).unwrap();
        let fused_r = Array2::from_shape_fn((1, cfg.d_model), |(_, j)| (j as f64 * 0.11).cos());
        let out = predict_heads(&pyr, &fused_r, &w, &cfg).unwrap();
        let c0 = out.cls_scores[0];
        assert!(out.cls_scores.iter().all(|&c| (c - c0).abs() < 1e-12));
        let o0 = out.offsets[0];
        assert!(out
            .offsets
            .iter()
            .all(|&(s, e)| (s - o0.0).abs() < 1e-12 && (e - o0.1).abs() < 1e-12));
    }

    fn hand_trace(t: usize, levels: usize) -> ForwardTrace {
        let anchors = pyramid_anchors(t, levels);
        let n = anchors.len();
        ForwardTrace {
            pooled: Array2::zeros((t, 1)),
            embedded_v: Array2::zeros((t, 1)),
            embedded_r: Array2::zeros((1, 1)),
            fused_v: Array2::zeros((t, 1)),
            fused_r: Array2::zeros((1, 1)),
            pyramid: Array2::zeros((n, 1)),
            cls_scores: vec![0.5; n],
            offsets: vec![(0.5, 0.5); n],
            frame_sims: vec![0.0; n],
            anchors,
            t,
        }
    }

    #[test]
    fn decode_rule_level0() {
        // level 0 position j = 4 of T = 8, offsets (1, 2), duration 80
        let mut trace = hand_trace(8, 4);
        trace.offsets[4] = (1.0, 2.0);
        trace.cls_scores[4] = 0.99;
        let cands = decode_candidates(&trace, 80.0, 1, DEFAULT_NMS_IOU).unwrap();
        assert!((cands[0].start - 35.0).abs() < 1e-9);
        assert!((cands[0].end - 65.0).abs() < 1e-9);
    }

    #[test]
    fn decode_rule_level1() {
        // level 1 position j = 0 of T = 8, offsets (0.5, 0.5), duration 8
        let mut trace = hand_trace(8, 4);
        let idx = 8; // first position of level 1
        assert_eq!(trace.anchors[idx], Anchor { level: 1, index: 0 });
        trace.offsets[idx] = (0.5, 0.5);
        trace.cls_scores[idx] = 0.99;
        let cands = decode_candidates(&trace, 8.0, 1, DEFAULT_NMS_IOU).unwrap();
        assert!((cands[0].start - 0.0).abs() < 1e-9);
        assert!((cands[0].end - 2.0).abs() < 1e-9);
    }

    #[test]
    fn decode_symmetric_offsets_center_position() {
        // the single level-3 position of T = 8 is centered; equal offsets
        // give a moment symmetric about the clip midpoint
        let mut trace = hand_trace(8, 4);
        let idx = trace.anchors.iter().position(|a| a.level == 3).unwrap();
        trace.offsets[idx] = (0.25, 0.25);
        trace.cls_scores[idx] = 0.99;
        let cands = decode_candidates(&trace, 60.0, 1, DEFAULT_NMS_IOU).unwrap();
        let mid = 30.0;
        assert!(((cands[0].start + cands[0].end) / 2.0 - mid).abs() < 1e-9);
    }

    #[test]
    fn decode_pre_clamp_order_holds() {
        let trace = hand_trace(8, 4);
        for (i, anchor) in trace.anchors.iter().enumerate() {
            let stride = anchor.stride();
            let c = anchor.center_frames();
            let (bs, be) = trace.offsets[i];
            assert!(c - bs * stride < c + be * stride);
        }
    }
}
