//! Deterministic input generators shared by the benchmarks.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use vtg_core::eval::EvalRecord;
use vtg_core::types::{FeatureSequence, Moment, RegToken};

pub fn random_features(seed: u64, t: usize, d: usize) -> (FeatureSequence, RegToken) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let features =
        FeatureSequence::new(t, 1, 1, d, values, (0..t).map(|i| i as f64).collect()).unwrap();
    let reg = RegToken::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    (features, reg)
}

pub fn random_candidates(seed: u64, n: usize, duration: f64) -> Vec<Moment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(0.01..0.3) * duration;
            let start = rng.random_range(0.0..(duration - len));
            Moment::with_score(start, start + len, rng.random_range(0.0..1.0)).unwrap()
        })
        .collect()
}

pub fn random_records(seed: u64, n: usize) -> Vec<EvalRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let gts: Vec<Moment> = (0..rng.random_range(1..=3usize))
                .map(|_| {
                    let s = rng.random_range(0.0..80.0);
                    Moment::new(s, s + rng.random_range(1.0..15.0)).unwrap()
                })
                .collect();
            let preds: Vec<Moment> = (0..rng.random_range(1..=6usize))
                .map(|_| {
                    let s = rng.random_range(0.0..80.0);
                    Moment::with_score(
                        s,
                        s + rng.random_range(1.0..15.0),
                        rng.random_range(0.0..1.0),
                    )
                    .unwrap()
                })
                .collect();
            EvalRecord::new(format!("bench-{i}"), preds, gts, Some(true)).unwrap()
        })
        .collect()
}
