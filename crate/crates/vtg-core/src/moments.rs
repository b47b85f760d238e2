//! Interval algebra and candidate post-processing: IoU/IoP, 1-D non-maximum
//! suppression, and top-k ranking.

use crate::types::Moment;

/// Default IoU threshold for suppressing duplicated candidates.
pub const DEFAULT_NMS_IOU: f64 = 0.75;

fn intersection_len(a: &Moment, b: &Moment) -> f64 {
    (a.end.min(b.end) - a.start.max(b.start)).max(0.0)
}

/// Intersection over union of two intervals, in `[0, 1]`.
///
/// When the union has zero length the value is 1 for identical point
/// intervals and 0 otherwise.
pub fn interval_iou(a: &Moment, b: &Moment) -> f64 {
    let inter = intersection_len(a, b);
    let union = a.len() + b.len() - inter;
    if union <= 0.0 {
        if a.start == b.start && a.end == b.end {
            return 1.0;
        }
        return 0.0;
    }
    inter / union
}

/// Intersection over prediction: fraction of `pred` covered by `gt`.
///
/// A zero-length prediction counts as 1 if its point lies inside `gt`,
/// otherwise 0.
pub fn interval_iop(pred: &Moment, gt: &Moment) -> f64 {
    if pred.len() <= 0.0 {
        let p = pred.start;
        return if p >= gt.start && p <= gt.end {
            1.0
        } else {
            0.0
        };
    }
    intersection_len(pred, gt) / pred.len()
}

/// The deterministic candidate ordering used by `nms` and `top_k`:
/// score descending, ties by earlier start, then original index.
fn ranked_indices(cands: &[Moment]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        let sa = cands[a].score.unwrap_or(0.0);
        let sb = cands[b].score.unwrap_or(0.0);
        sb.partial_cmp(&sa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(
                cands[a]
                    .start
                    .partial_cmp(&cands[b].start)
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
            .then(a.cmp(&b))
    });
    order
}

/// Greedy non-maximum suppression over scored intervals.
///
/// Candidates are visited in rank order; a candidate is dropped when its IoU
/// with an already kept one strictly exceeds `iou_threshold`. Output keeps
/// the rank order.
pub fn nms(cands: &[Moment], iou_threshold: f64) -> Vec<Moment> {
    let order = ranked_indices(cands);
    let mut kept: Vec<Moment> = Vec::new();
    for idx in order {
        let cand = &cands[idx];
        if kept.iter().all(|k| interval_iou(k, cand) <= iou_threshold) {
            kept.push(*cand);
        }
    }
    kept
}

/// First `k` candidates in the `nms` ordering (no suppression applied here).
pub fn top_k(cands: &[Moment], k: usize) -> Vec<Moment> {
    ranked_indices(cands)
        .into_iter()
        .take(k)
        .map(|i| cands[i])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(start: f64, end: f64) -> Moment {
        Moment::new(start, end).unwrap()
    }

    fn sm(start: f64, end: f64, score: f64) -> Moment {
        Moment::with_score(start, end, score).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert!((interval_iou(&m(5.0, 15.0), &m(10.0, 20.0)) - 5.0 / 15.0).abs() < 1e-12);
        assert_eq!(interval_iou(&m(3.0, 7.0), &m(3.0, 7.0)), 1.0);
        assert_eq!(interval_iou(&m(0.0, 1.0), &m(2.0, 3.0)), 0.0);
    }

    #[test]
    fn iou_degenerate_points() {
        assert_eq!(interval_iou(&m(3.0, 3.0), &m(3.0, 3.0)), 1.0);
        assert_eq!(interval_iou(&m(3.0, 3.0), &m(5.0, 5.0)), 0.0);
    }

    #[test]
    fn iop_examples() {
        assert!((interval_iop(&m(5.0, 15.0), &m(10.0, 30.0)) - 0.5).abs() < 1e-12);
        assert_eq!(interval_iop(&m(12.0, 14.0), &m(10.0, 30.0)), 1.0);
        assert_eq!(interval_iop(&m(0.0, 1.0), &m(2.0, 3.0)), 0.0);
    }

    #[test]
    fn iop_zero_length_pred() {
        assert_eq!(interval_iop(&m(12.0, 12.0), &m(10.0, 30.0)), 1.0);
        assert_eq!(interval_iop(&m(5.0, 5.0), &m(10.0, 30.0)), 0.0);
    }

    #[test]
    fn nms_suppresses_heavy_overlap() {
        let cands = vec![sm(0.0, 10.0, 0.9), sm(1.0, 10.0, 0.8), sm(20.0, 30.0, 0.7)];
        let kept = nms(&cands, 0.75);
        assert_eq!(kept.len(), 2);
        assert_eq!((kept[0].start, kept[0].end), (0.0, 10.0));
        assert_eq!((kept[1].start, kept[1].end), (20.0, 30.0));
    }

    #[test]
    fn nms_single_candidate_unchanged() {
        let cands = vec![sm(0.0, 10.0, 0.5)];
        assert_eq!(nms(&cands, 0.75), cands);
    }

    #[test]
    fn nms_threshold_one_keeps_distinct() {
        let cands = vec![sm(0.0, 10.0, 0.9), sm(1.0, 10.0, 0.8), sm(0.0, 9.0, 0.7)];
        assert_eq!(nms(&cands, 1.0).len(), 3);
    }

    #[test]
    fn top_k_cases() {
        let cands: Vec<Moment> = (0..7)
            .map(|i| sm(i as f64, i as f64 + 1.0, i as f64 / 10.0))
            .collect();
        let top = top_k(&cands, 5);
        assert_eq!(top.len(), 5);
        assert_eq!(top[0].score, Some(0.6));
        assert!(top_k(&cands, 0).is_empty());
        assert_eq!(top_k(&cands, 99).len(), 7);
    }

    /// Reference suppression: repeatedly take the best remaining candidate
    /// and erase everything overlapping it beyond the threshold.
    pub(crate) fn nms_brute_force(cands: &[Moment], thr: f64) -> Vec<Moment> {
        let mut remaining: Vec<(usize, Moment)> = cands.iter().copied().enumerate().collect();
        let mut kept = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for i in 1..remaining.len() {
                let (bi, bm) = &remaining[best];
                let (ci, cm) = &remaining[i];
                let (bs, cs) = (bm.score.unwrap_or(0.0), cm.score.unwrap_or(0.0));
                let better = cs > bs
                    || (cs == bs && cm.start < bm.start)
                    || (cs == bs && cm.start == bm.start && ci < bi);
                if better {
                    best = i;
                }
            }
            let (_, winner) = remaining.remove(best);
            kept.push(winner);
            remaining.retain(|(_, c)| interval_iou(&winner, c) <= thr);
        }
        kept
    }

    proptest! {
        #[test]
        fn nms_matches_brute_force(
            raw in proptest::collection::vec((0.0f64..100.0, 0.0f64..30.0, 0.0f64..1.0), 0..12)
        ) {
            let cands: Vec<Moment> = raw
                .iter()
                .map(|&(s, len, sc)| sm(s, s + len, (sc * 100.0).round() / 100.0))
                .collect();
            let fast = nms(&cands, DEFAULT_NMS_IOU);
            let slow = nms_brute_force(&cands, DEFAULT_NMS_IOU);
            prop_assert_eq!(fast, slow);
        }

        #[test]
        fn nms_output_scores_non_increasing(
            raw in proptest::collection::vec((0.0f64..100.0, 0.1f64..30.0, 0.0f64..1.0), 1..12)
        ) {
            let cands: Vec<Moment> = raw.iter().map(|&(s, len, sc)| sm(s, s + len, sc)).collect();
            let kept = nms(&cands, DEFAULT_NMS_IOU);
            for pair in kept.windows(2) {
                prop_assert!(pair[0].score.unwrap() >= pair[1].score.unwrap());
            }
            for i in 0..kept.len() {
                for j in (i + 1)..kept.len() {
                    prop_assert!(interval_iou(&kept[i], &kept[j]) <= DEFAULT_NMS_IOU);
                }
            }
        }

        #[test]
        fn iou_bounds_and_symmetry(
            a in (0.0f64..50.0, 0.0f64..20.0),
            b in (0.0f64..50.0, 0.0f64..20.0)
        ) {
            let ma = m(a.0, a.0 + a.1);
            let mb = m(b.0, b.0 + b.1);
            let iou = interval_iou(&ma, &mb);
            prop_assert!((0.0..=1.0).contains(&iou));
            prop_assert_eq!(iou, interval_iou(&mb, &ma));
            prop_assert_eq!(interval_iou(&ma, &ma), 1.0);
        }

        #[test]
        fn clamp_idempotent_and_shrinking(
            s in -20.0f64..120.0,
            len in 0.0f64..50.0,
            dur in 1.0f64..100.0
        ) {
            let raw = Moment { start: s, end: s + len, score: None };
            let once = crate::types::clamp_moment(&raw, dur);
            let twice = crate::types::clamp_moment(&once, dur);
            prop_assert_eq!(once, twice);
            prop_assert!(once.len() <= raw.len() + 1e-12);
        }

        #[test]
        fn normalize_roundtrip_identity(
            s in 0.0f64..50.0,
            len in 0.0f64..50.0,
            dur in 100.0f64..1000.0
        ) {
            let mm = m(s, s + len);
            let (ns, ne) = crate::types::moment_normalize(&mm, dur).unwrap();
            prop_assert!((ns * dur - mm.start).abs() < 1e-12 * dur.max(1.0));
            prop_assert!((ne * dur - mm.end).abs() < 1e-12 * dur.max(1.0));
        }
    }
}
