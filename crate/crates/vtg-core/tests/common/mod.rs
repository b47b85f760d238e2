//! Shared deterministic fixtures for integration tests.

use vtg_core::decoder::{DecoderConfig, DecoderWeights};
use vtg_core::training::{
    assign_targets, seeded_rng, LossParams, TargetAssignment, MAX_OFFSET_UNITS,
};
use vtg_core::types::{FeatureSequence, Moment, RegToken};

pub struct SpecFixture {
    pub features: FeatureSequence,
    pub reg: RegToken,
    pub weights: DecoderWeights,
    pub cfg: DecoderConfig,
    pub assignment: TargetAssignment,
    pub params: LossParams,
}

/// The tiny decoder fixture used for goldens and the gradient check:
/// T = 8 frames, 16-wide decoder, one encoder layer, seed-42 weights.
pub fn spec_fixture() -> SpecFixture {
    let cfg = DecoderConfig::tiny();
    let weights = DecoderWeights::init(&cfg, 42).unwrap();
    let t = 8usize;
    let d = cfg.d_input;
    let mut values = Vec::with_capacity(t * d);
    for ti in 0..t {
        for k in 0..d {
            values.push(((ti * 7 + k * 3) as f64 * 0.11).sin());
        }
    }
    let features =
        FeatureSequence::new(t, 1, 1, d, values, (0..t).map(|i| i as f64).collect()).unwrap();
    let reg = RegToken::new((0..d).map(|i| (i as f64 * 0.31).cos()).collect()).unwrap();
    let gt = Moment::new(2.0, 6.0).unwrap();
    let mut rng = seeded_rng(42);
    let assignment = assign_targets(
        &gt,
        t as f64,
        t,
        cfg.pyramid_levels,
        MAX_OFFSET_UNITS,
        &mut rng,
    )
    .unwrap();
    SpecFixture {
        features,
        reg,
        weights,
        cfg,
        assignment,
        params: LossParams::default(),
    }
}

/// Compare against (or, with `VTG_REGEN_GOLDEN=1`, rewrite) a fixture file.
pub fn check_golden(path: &std::path::Path, actual: &str) {
    if std::env::var("VTG_REGEN_GOLDEN").is_ok_and(|v| v == "1") {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(path, actual).unwrap();
        eprintln!("regenerated golden {}", path.display());
        return;
    }
    let expected = std::fs::read_to_string(path).unwrap_or_else(|e| {
        panic!(
            "missing golden {}: {e}; run with VTG_REGEN_GOLDEN=1",
            path.display()
        )
    });
    assert_eq!(expected, actual, "golden mismatch for {}", path.display());
}

pub fn fixture_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}
