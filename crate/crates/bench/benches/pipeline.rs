use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use lsr_core::dataset::synth::generate;
use lsr_core::features::{binary_descriptor, hog_patch};
use lsr_core::geometry_validator::projective_invariant;
use lsr_core::regressor::{predict, train_cascade, train_global_regression, TrainingSample};
use lsr_core::{FeatureConfig, Point2, PupilIndices, SyntheticFaceConfig, TrainConfig};

fn faces(count: usize) -> Vec<(lsr_core::dataset::SyntheticFace, lsr_core::GrayImage)> {
    generate(&SyntheticFaceConfig { count, rng_seed: 1, ..Default::default() }).expect("valid synthetic config")
}

fn features(c: &mut Criterion) {
    let (face, img) = faces(1).remove(0);
    let center = face.landmarks().points()[30];
    let cfg = FeatureConfig::default();
    c.bench_function("hog_patch", |b| b.iter(|| hog_patch(black_box(&img), center, &cfg).unwrap()));
    c.bench_function("binary_descriptor", |b| b.iter(|| binary_descriptor(black_box(&img), center, &cfg).unwrap()));
}

fn training(c: &mut Criterion) {
    let data = faces(30);
    let shapes: Vec<_> = data.iter().map(|(f, _)| f.landmarks()).collect();
    let samples: Vec<TrainingSample<'_>> = data
        .iter()
        .zip(&shapes)
        .map(|((f, img), s)| TrainingSample { image: img, bbox: f.bbox, shape: s, survives: true })
        .collect();
    let cfg = TrainConfig { stages: 1, pupils: Some(PupilIndices::ibug68()), ..Default::default() };
    let mut group = c.benchmark_group("cascade");
    group.sample_size(10);
    group.bench_function("train_one_stage_30_faces", |b| b.iter(|| train_cascade(black_box(&samples), &cfg).unwrap()));
    let (model, _) = train_cascade(&samples, &TrainConfig { stages: 5, ..cfg.clone() }).unwrap();
    let (face, img) = &data[0];
    group.bench_function("predict_5_stages", |b| b.iter(|| predict(&model, black_box(img), &face.bbox)));
    group.finish();
}

fn ridge(c: &mut Criterion) {
    // one active leaf per tree, 340 trees of 16 leaves
    let (rows, trees, leaves, out) = (600usize, 340usize, 16usize, 136usize);
    let phi: Vec<Vec<u32>> = (0..rows)
        .map(|i| (0..trees).map(|t| (t * leaves + (i * 31 + t * 17 + i * t) % leaves) as u32).collect())
        .collect();
    let targets: Vec<Vec<f64>> =
        (0..rows).map(|i| (0..out).map(|o| ((i * 7 + o * 3) % 11) as f64 - 5.0).collect()).collect();
    let survives = vec![true; rows];
    let dim = trees * leaves;
    let mut group = c.benchmark_group("ridge");
    group.sample_size(10);
    group.bench_function("kernel_600x5440", |b| {
        b.iter(|| train_global_regression(black_box(&phi), &targets, &survives, dim, 0.1 * dim as f64).unwrap())
    });
    group.finish();
}

fn invariants(c: &mut Criterion) {
    let five = [(0.0, 0.0), (1.0, 0.1), (0.2, 1.0), (1.1, 0.9), (0.5, 1.7)].map(|(x, y)| Point2::new(x, y));
    let six = [(0.0, 0.0), (1.0, 0.1), (0.2, 1.0), (1.1, 0.9), (0.5, 1.7), (-0.6, 0.8)].map(|(x, y)| Point2::new(x, y));
    c.bench_function("invariant_5", |b| b.iter(|| projective_invariant(black_box(&five)).unwrap()));
    c.bench_function("invariant_6", |b| b.iter(|| projective_invariant(black_box(&six)).unwrap()));
}

criterion_group!(benches, features, training, ridge, invariants);
criterion_main!(benches);
