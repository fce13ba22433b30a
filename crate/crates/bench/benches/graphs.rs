use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2c_core::cgn::{build_base_graph, calibrate, predict, CalibrationMode};
use s2c_core::sgn::{build_sample_graph, refine_class_features, RefinedClassFeature};
use s2c_core::{AttentionParams, ClassGraph, ClassId, EdgeEncoderParams, EdgeMode};

const DIM: usize = 16;

fn matrix(rng: &mut ChaCha8Rng, rows: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, DIM), |_| rng.random_range(-1.0..1.0))
}

fn graph(rng: &mut ChaCha8Rng, classes: usize) -> ClassGraph {
    let m = matrix(rng, classes);
    let protos: Vec<_> = m
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| (ClassId(i as u32), r.to_owned()))
        .collect();
    build_base_graph(&protos).unwrap()
}

fn refine(c: &mut Criterion) {
    let mut group = c.benchmark_group("refine");
    let edge = EdgeEncoderParams::init(DIM, 16, -6.0, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (way, shot) in [(2, 5), (5, 5), (10, 5)] {
        let z = matrix(&mut rng, way * shot);
        let labels: Vec<ClassId> = (0..way * shot).map(|i| ClassId((i / shot) as u32)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(format!("{way}x{shot}")), &z, |b, z| {
            b.iter(|| {
                let g = build_sample_graph(&edge, z.view(), &labels, EdgeMode::Learned).unwrap();
                black_box(refine_class_features(&edge, &g, 2, EdgeMode::Learned).unwrap())
            })
        });
    }
    group.finish();
}

fn calibrate_bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("calibrate");
    let attention = AttentionParams::init(DIM, 1, false, 0.01, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for nodes in [12, 60, 100] {
        let g = graph(&mut rng, nodes);
        let new: Vec<RefinedClassFeature> = matrix(&mut rng, 5)
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, r)| RefinedClassFeature {
                label: ClassId(1000 + i as u32),
                values: r.to_owned(),
            })
            .collect();
        for mode in [CalibrationMode::Literal, CalibrationMode::Softmax] {
            group.bench_with_input(BenchmarkId::new(format!("{mode:?}"), nodes), &g, |b, g| {
                b.iter(|| black_box(calibrate(g, &new, &attention, mode).unwrap()))
            });
        }
    }
    group.finish();
}

fn predict_bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("predict");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for nodes in [20, 100, 200] {
        let g = graph(&mut rng, nodes);
        let q: Array1<f64> = (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(nodes), &g, |b, g| {
            b.iter(|| black_box(predict(g, q.view()).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, refine, calibrate_bench, predict_bench);
criterion_main!(benches);
