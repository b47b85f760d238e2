use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use vtg_bench::random_features;
use vtg_core::decoder::{decode_candidates, forward, DecoderConfig, DecoderWeights};
use vtg_core::moments::DEFAULT_NMS_IOU;

fn bench_forward_tiny(c: &mut Criterion) {
    let cfg = DecoderConfig::tiny();
    let w = DecoderWeights::init(&cfg, 42).unwrap();
    let (features, reg) = random_features(1, 32, cfg.d_input);
    c.bench_function("decoder_forward_t32_d16", |b| {
        b.iter(|| forward(black_box(&features), black_box(&reg), &w, &cfg).unwrap())
    });
}

fn bench_forward_full(c: &mut Criterion) {
    let cfg = DecoderConfig::default();
    let w = DecoderWeights::init(&cfg, 42).unwrap();
    let (features, reg) = random_features(2, 64, cfg.d_input);
    let mut group = c.benchmark_group("decoder_forward_full");
    group.sample_size(10);
    group.bench_function("t64_d256_l3", |b| {
        b.iter(|| forward(black_box(&features), black_box(&reg), &w, &cfg).unwrap())
    });
    group.finish();
}

fn bench_decode(c: &mut Criterion) {
    let cfg = DecoderConfig::tiny();
    let w = DecoderWeights::init(&cfg, 42).unwrap();
    let (features, reg) = random_features(3, 64, cfg.d_input);
    let trace = forward(&features, &reg, &w, &cfg).unwrap();
    c.bench_function("decode_candidates_t64", |b| {
        b.iter(|| decode_candidates(black_box(&trace), 120.0, 5, DEFAULT_NMS_IOU).unwrap())
    });
}

criterion_group!(
    benches,
    bench_forward_tiny,
    bench_forward_full,
    bench_decode
);
criterion_main!(benches);
