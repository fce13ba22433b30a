//! Library routines checked against naive loop implementations.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2c_core::backbone::{class_prototype, extract_features};
use s2c_core::cgn::{build_base_graph, calibrate, cgn_loss, predict, AttentionParams, CalibrationMode, ClassGraph};
use s2c_core::harness::evaluate_session;
use s2c_core::protocol::{ClassId, LabeledDataset};
use s2c_core::sgn::RefinedClassFeature;
use s2c_core::BackboneParams;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0))
}

fn loop_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn loop_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (loop_norm(a) * loop_norm(b))
}

fn graph(m: &Array2<f64>) -> ClassGraph {
    let protos: Vec<_> = m
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| (ClassId(i as u32), r.to_owned()))
        .collect();
    build_base_graph(&protos).unwrap()
}

fn brute_predict(protos: &Array2<f64>, q: &[f64]) -> ClassId {
    let mut best = (0usize, f64::NEG_INFINITY);
    for i in 0..protos.nrows() {
        let row: Vec<f64> = protos.row(i).to_vec();
        let s = loop_cosine(&row, q);
        if s > best.1 {
            best = (i, s);
        }
    }
    ClassId(best.0 as u32)
}

#[test]
fn predict_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.random_range(1..9);
        let d = rng.random_range(1..7);
        let protos = random_matrix(&mut rng, n, d);
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let got = predict(&graph(&protos), Array1::from(q.clone()).view()).unwrap();
        assert_eq!(got.label, brute_predict(&protos, &q));
    }
}

#[test]
fn prototypes_and_edges_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let n = rng.random_range(2..20);
        let d = rng.random_range(1..6);
        let z = random_matrix(&mut rng, n, d);
        let labels: Vec<ClassId> = (0..n).map(|_| ClassId(rng.random_range(0..3))).collect();
        for c in 0..3 {
            let target = ClassId(c);
            let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == target).collect();
            let got = class_prototype(z.view(), &labels, target);
            if rows.is_empty() {
                assert!(got.is_err());
                continue;
            }
            let got = got.unwrap();
            for k in 0..d {
                let mean = rows.iter().map(|&i| z[[i, k]]).sum::<f64>() / rows.len() as f64;
                assert!((got[k] - mean).abs() <= 1e-12);
            }
        }
        let g = graph(&z);
        for i in 0..n {
            for j in 0..n {
                let want = loop_cosine(&z.row(i).to_vec(), &z.row(j).to_vec());
                assert!((g.edges()[[i, j]] - want).abs() <= 1e-12);
            }
        }
    }
}

/// Dense per-entry attention: `x_i + sum_j a_ij v_j` per head.
fn dense_calibration(context: &Array2<f64>, new: &Array2<f64>, p: &AttentionParams, softmax: bool) -> Array2<f64> {
    let d = new.ncols();
    let dh = d / p.head_count;
    let values: Vec<Vec<f64>> = context
        .rows()
        .into_iter()
        .chain(new.rows())
        .map(|r| r.to_vec())
        .collect();
    let project = |x: &[f64], w: &Array2<f64>, col: usize| (0..d).map(|k| x[k] * w[[k, col]]).sum::<f64>();
    let mut out = new.clone();
    for i in 0..new.nrows() {
        let x = new.row(i).to_vec();
        for h in 0..p.head_count {
            let cols = h * dh..(h + 1) * dh;
            let mut scores: Vec<f64> = values
                .iter()
                .map(|v| {
                    cols.clone()
                        .map(|c| project(&x, &p.wq, c) * project(v, &p.wk, c))
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            if softmax {
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                scores.iter_mut().for_each(|s| *s = (*s - max).exp() / total);
            }
            for c in cols {
                out[[i, c]] += scores.iter().zip(&values).map(|(a, v)| a * v[c]).sum::<f64>();
            }
        }
    }
    out
}

#[test]
fn calibrate_matches_dense_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..200 {
        let heads = [1, 2][trial % 2];
        let d = heads * rng.random_range(1..4);
        let (n_ctx, n_new) = (rng.random_range(1..5), rng.random_range(1..4));
        let ctx = random_matrix(&mut rng, n_ctx, d);
        let new = random_matrix(&mut rng, n_new, d);
        let p = AttentionParams::init(d, heads, trial % 3 == 0, 0.5, trial as u64);
        let g = graph(&ctx);
        let features: Vec<_> = new
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, r)| RefinedClassFeature {
                label: ClassId(100 + i as u32),
                values: r.to_owned(),
            })
            .collect();
        for (mode, softmax) in [(CalibrationMode::Softmax, true), (CalibrationMode::Literal, false)] {
            let got = calibrate(&g, &features, &p, mode).unwrap().feature_matrix();
            let want = dense_calibration(&ctx, &new, &p, softmax);
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{mode:?}: {a} vs {b}");
            }
        }
        let passthrough = calibrate(&g, &features, &p, CalibrationMode::Disabled)
            .unwrap()
            .feature_matrix();
        assert_eq!(passthrough, new);
    }
}

#[test]
fn cgn_loss_matches_loop_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..200 {
        let c = rng.random_range(1..6);
        let d = rng.random_range(1..6);
        let n = rng.random_range(1..10);
        let protos = random_matrix(&mut rng, c, d);
        let z = random_matrix(&mut rng, n, d);
        let labels: Vec<ClassId> = (0..n).map(|_| ClassId(rng.random_range(0..c as u32))).collect();
        let scale = rng.random_range(1.0..20.0);
        let mut want = 0.0;
        for i in 0..n {
            let logits: Vec<f64> = (0..c)
                .map(|j| scale * loop_cosine(&z.row(i).to_vec(), &protos.row(j).to_vec()))
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            want += lse - logits[labels[i].0 as usize];
        }
        want /= n as f64;
        let got = cgn_loss(z.view(), &labels, &graph(&protos), scale).unwrap();
        assert!((got - want).abs() <= 1e-10 * (1.0 + want.abs()));
    }
}

#[test]
fn evaluate_session_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for trial in 0..50 {
        let backbone = BackboneParams::init(4, 8, 3, trial);
        let protos = random_matrix(&mut rng, 4, 3);
        let samples: Vec<(Array1<f64>, ClassId)> = (0..40)
            .map(|_| {
                let x: Array1<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
                (x, ClassId(rng.random_range(0..4)))
            })
            .collect();
        let mut correct = 0;
        for (x, y) in &samples {
            let z = extract_features(&backbone, x.view().insert_axis(ndarray::Axis(0))).unwrap();
            if brute_predict(&protos, &z.row(0).to_vec()) == *y {
                correct += 1;
            }
        }
        let got = evaluate_session(&backbone, &graph(&protos), &LabeledDataset::new(samples.clone())).unwrap();
        assert_eq!(got, correct as f64 / 40.0);
        let mut stray = samples;
        stray[0].1 = ClassId(9);
        let err = evaluate_session(&backbone, &graph(&protos), &LabeledDataset::new(stray)).unwrap_err();
        assert!(matches!(err, s2c_core::Error::UnknownLabel(ClassId(9))));
    }
}

#[allow(dead_code)]
pub const SUITE: &[(&str, fn())] = &[
    ("predict", predict_matches_brute_force),
    ("prototypes_and_edges", prototypes_and_edges_match_loops),
    ("calibrate", calibrate_matches_dense_attention),
    ("cgn_loss", cgn_loss_matches_loop_cross_entropy),
    ("evaluate_session", evaluate_session_matches_brute_force),
];
