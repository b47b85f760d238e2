//! Finite-difference verification of the decoder's analytic gradients.

use ndarray::Array2;

use crate::decoder::tape::Tape;
use crate::decoder::{avg_pool_frames, forward_on_tape, DecoderConfig, DecoderWeights};
use crate::error::Result;
use crate::types::{FeatureSequence, RegToken};

use super::{loss_on_tape, LossParams, TargetAssignment};

/// Differences below this magnitude are treated as zero when comparing
/// gradients, so a zero-loss point does not produce spurious relative error.
pub const GRAD_ABS_TOL: f64 = 1e-9;

/// Outcome of one gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per weight tensor, in tensor order.
    pub per_tensor: Vec<(String, f64)>,
}

fn reg_row(reg: &RegToken) -> Array2<f64> {
    Array2::from_shape_vec((1, reg.values.len()), reg.values.clone()).expect("reg row")
}

/// Total loss of one (features, reg, gt-assignment) example under `w`.
pub fn eval_loss(
    f: &FeatureSequence,
    reg: &RegToken,
    w: &DecoderWeights,
    cfg: &DecoderConfig,
    ta: &TargetAssignment,
    p: &LossParams,
) -> Result<f64> {
    let mut tape = Tape::new();
    let wv = w.stage(&mut tape);
    let tv = forward_on_tape(&mut tape, avg_pool_frames(f), reg_row(reg), &wv, cfg);
    let loss = loss_on_tape(&mut tape, &tv.heads, ta, p);
    Ok(tape.scalar(loss))
}

/// Loss and its gradient with respect to every weight tensor, via the tape.
pub fn analytic_grads(
    f: &FeatureSequence,
    reg: &RegToken,
    w: &DecoderWeights,
    cfg: &DecoderConfig,
    ta: &TargetAssignment,
    p: &LossParams,
) -> Result<(f64, Vec<(String, Array2<f64>)>)> {
    let mut tape = Tape::new();
    let wv = w.stage(&mut tape);
    let tv = forward_on_tape(&mut tape, avg_pool_frames(f), reg_row(reg), &wv, cfg);
    let loss = loss_on_tape(&mut tape, &tv.heads, ta, p);
    let value = tape.scalar(loss);
    let grads = tape.backward(loss);
    let out = wv
        .entries()
        .iter()
        .map(|(name, var)| (name.clone(), grads.of(&tape, *var)))
        .collect();
    Ok((value, out))
}

/// Central finite differences of the loss over every weight element.
pub fn finite_difference_grads(
    f: &FeatureSequence,
    reg: &RegToken,
    w: &DecoderWeights,
    cfg: &DecoderConfig,
    ta: &TargetAssignment,
    p: &LossParams,
    eps: f64,
) -> Result<Vec<(String, Array2<f64>)>> {
    let names: Vec<(String, (usize, usize))> =
        w.tensors().into_iter().map(|(n, t)| (n, t.dim())).collect();
    let mut out = Vec::with_capacity(names.len());
    for (ti, (name, dim)) in names.iter().enumerate() {
        let mut grad = Array2::zeros(*dim);
        for r in 0..dim.0 {
            for c in 0..dim.1 {
                let probe = |delta: f64| -> Result<f64> {
                    let mut wp = w.clone();
                    *wp.tensors_mut()[ti].1.get_mut((r, c)).expect("index") += delta;
                    eval_loss(f, reg, &wp, cfg, ta, p)
                };
                let plus = probe(eps)?;
                let minus = probe(-eps)?;
                grad[(r, c)] = (plus - minus) / (2.0 * eps);
            }
        }
        out.push((name.clone(), grad));
    }
    Ok(out)
}

/// Worst relative error between two gradient sets; differences below
/// `abs_tol` count as zero.
pub fn max_relative_error(
    a: &[(String, Array2<f64>)],
    b: &[(String, Array2<f64>)],
    abs_tol: f64,
) -> (f64, Vec<(String, f64)>) {
    assert_eq!(a.len(), b.len(), "gradient sets must align");
    let mut per_tensor = Vec::with_capacity(a.len());
    let mut overall: f64 = 0.0;
    for ((name_a, ga), (name_b, gb)) in a.iter().zip(b.iter()) {
        assert_eq!(name_a, name_b, "gradient tensor order must align");
        let mut worst: f64 = 0.0;
        for (x, y) in ga.iter().zip(gb.iter()) {
            let diff = (x - y).abs();
            if diff <= abs_tol {
                continue;
            }
            worst = worst.max(diff / x.abs().max(y.abs()));
        }
        overall = overall.max(worst);
        per_tensor.push((name_a.clone(), worst));
    }
    (overall, per_tensor)
}

/// Compare analytic gradients against central finite differences over every
/// weight tensor; returns the worst relative error.
pub fn gradient_check(
    f: &FeatureSequence,
    reg: &RegToken,
    w: &DecoderWeights,
    cfg: &DecoderConfig,
    ta: &TargetAssignment,
    p: &LossParams,
    eps: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = analytic_grads(f, reg, w, cfg, ta, p)?;
    let fd = finite_difference_grads(f, reg, w, cfg, ta, p, eps)?;
    let (max_rel_error, per_tensor) = max_relative_error(&analytic, &fd, GRAD_ABS_TOL);
    Ok(GradCheckReport {
        max_rel_error,
        per_tensor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{assign_targets, MAX_OFFSET_UNITS};
    use crate::types::Moment;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro_fixture() -> (
        FeatureSequence,
        RegToken,
        DecoderWeights,
        DecoderConfig,
        TargetAssignment,
        LossParams,
    ) {
        let cfg = DecoderConfig {
            d_model: 8,
            d_input: 6,
            n_layers: 1,
            n_heads: 2,
            pyramid_levels: 2,
            ffn_mult: 2,
            pe_base: 10000.0,
        };
        let w = DecoderWeights::init(&cfg, 42).unwrap();
        let t = 4;
        let mut vals = Vec::new();
        for ti in 0..t {
            for k in 0..cfg.d_input {
                vals.push(((ti * 5 + k * 3) as f64 * 0.17).sin());
            }
        }
        let f = FeatureSequence::new(
            t,
            1,
            1,
            cfg.d_input,
            vals,
            (0..t).map(|i| i as f64).collect(),
        )
        .unwrap();
        let reg =
            RegToken::new((0..cfg.d_input).map(|i| (i as f64 + 0.3).cos()).collect()).unwrap();
        let gt = Moment::new(1.0, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ta = assign_targets(
            &gt,
            t as f64,
            t,
            cfg.pyramid_levels,
            MAX_OFFSET_UNITS,
            &mut rng,
        )
        .unwrap();
        (f, reg, w, cfg, ta, LossParams::default())
    }

    #[test]
    fn micro_gradients_match_finite_differences() {
        let (f, reg, w, cfg, ta, p) = micro_fixture();
        let report = gradient_check(&f, &reg, &w, &cfg, &ta, &p, 1e-5).unwrap();
        assert!(
            report.max_rel_error <= 1e-6,
            "max relative error {} (worst: {:?})",
            report.max_rel_error,
            report.per_tensor.iter().max_by(|a, b| a.1.total_cmp(&b.1))
        );
    }

    #[test]
    fn corrupted_gradient_detected() {
        let (f, reg, w, cfg, ta, p) = micro_fixture();
        let (_, mut analytic) = analytic_grads(&f, &reg, &w, &cfg, &ta, &p).unwrap();
        let fd = finite_difference_grads(&f, &reg, &w, &cfg, &ta, &p, 1e-5).unwrap();
        let target = analytic
            .iter_mut()
            .find(|(n, _)| n == "proj_v.weight")
            .unwrap();
        target.1.mapv_inplace(|v| v * 1.01);
        let (err, _) = max_relative_error(&analytic, &fd, GRAD_ABS_TOL);
        assert!(err > 1e-3, "corruption must exceed 1e-3, got {err}");
    }

    #[test]
    fn near_zero_gradients_compare_clean() {
        let tiny_a = vec![("x".to_string(), Array2::from_elem((2, 2), 1e-12))];
        let tiny_b = vec![("x".to_string(), Array2::from_elem((2, 2), -1e-12))];
        let (err, _) = max_relative_error(&tiny_a, &tiny_b, GRAD_ABS_TOL);
        assert_eq!(err, 0.0);
    }
}
