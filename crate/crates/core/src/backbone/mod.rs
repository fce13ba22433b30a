//! Feature extractor, base-session pretraining and class prototypes.
//!
//! The extractor is a two-layer perceptron `x -> relu(x W1 + b1) W2 + b2`.
//! It is pretrained with cross-entropy over a cosine classifier head and is
//! frozen afterwards: every later stage only reads it.

mod head;

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::optim::{CosineSchedule, Sgd};
use crate::protocol::{ClassId, LabeledDataset, SessionStream};
use crate::seed::{self, tag};
use crate::tensor::{Archive, TensorVisitor, Tensors};
use crate::{Error, Result};

pub use head::ClassifierHead;

/// A sample's feature vector.
pub type Embedding = Array1<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Tensors for BackboneParams {
    fn visit(&self, f: &mut TensorVisitor<'_>) {
        f("w1", self.w1.shape(), self.w1.as_slice().unwrap());
        f("b1", self.b1.shape(), self.b1.as_slice().unwrap());
        f("w2", self.w2.shape(), self.w2.as_slice().unwrap());
        f("b2", self.b2.shape(), self.b2.as_slice().unwrap());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("w1", self.w1.as_slice_mut().unwrap());
        f("b1", self.b1.as_slice_mut().unwrap());
        f("w2", self.w2.as_slice_mut().unwrap());
        f("b2", self.b2.as_slice_mut().unwrap());
    }
}

pub(crate) fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

pub(crate) fn uniform_vector(rng: &mut impl Rng, len: usize, bound: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || rng.random_range(-bound..=bound))
}

struct ForwardCache {
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl BackboneParams {
    /// Seeded uniform init scaled by `1/sqrt(fan_in)`.
    pub fn init(input_dim: usize, hidden_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, tag::BACKBONE_INIT);
        let b_in = 1.0 / (input_dim as f64).sqrt();
        let b_hid = 1.0 / (hidden_dim as f64).sqrt();
        BackboneParams {
            w1: uniform_matrix(&mut rng, input_dim, hidden_dim, b_in),
            b1: uniform_vector(&mut rng, hidden_dim, b_in),
            w2: uniform_matrix(&mut rng, hidden_dim, output_dim, b_hid),
            b2: uniform_vector(&mut rng, output_dim, b_hid),
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        BackboneParams {
            w1: Array2::zeros((input_dim, hidden_dim)),
            b1: Array1::zeros(hidden_dim),
            w2: Array2::zeros((hidden_dim, output_dim)),
            b2: Array1::zeros(output_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden_dim(), self.output_dim())
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.ncols()
    }

    fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, ForwardCache) {
        let pre = x.dot(&self.w1) + &self.b1;
        let hidden = pre.mapv(|v| v.max(0.0));
        let out = hidden.dot(&self.w2) + &self.b2;
        (out, ForwardCache { pre, hidden })
    }

    fn backward(&self, x: ArrayView2<'_, f64>, cache: &ForwardCache, d_out: ArrayView2<'_, f64>) -> Self {
        let w2 = cache.hidden.t().dot(&d_out);
        let b2 = d_out.sum_axis(Axis(0));
        let mut d_pre = d_out.dot(&self.w2.t());
        d_pre.zip_mut_with(&cache.pre, |g, &p| {
            if p <= 0.0 {
                *g = 0.0
            }
        });
        BackboneParams {
            w1: x.t().dot(&d_pre),
            b1: d_pre.sum_axis(Axis(0)),
            w2,
            b2,
        }
    }

    pub fn write_checkpoint(&self, w: impl Write) -> Result<()> {
        let mut a = Archive::new(self.output_dim());
        a.push_all("backbone", self);
        a.write(w)
    }

    pub fn read_checkpoint(r: impl Read) -> Result<Self> {
        Self::from_archive(&Archive::read(r)?)
    }

    pub(crate) fn from_archive(a: &Archive) -> Result<Self> {
        let w1 = a.get("backbone.w1")?;
        let w2 = a.get("backbone.w2")?;
        if w1.shape.len() != 2 || w2.shape.len() != 2 || w1.shape[1] != w2.shape[0] {
            return Err(Error::format("checkpoint", "inconsistent backbone layer shapes"));
        }
        if w2.shape[1] != a.output_dim {
            return Err(Error::ShapeMismatch {
                expected: a.output_dim,
                got: w2.shape[1],
            });
        }
        let mut p = Self::zeros(w1.shape[0], w1.shape[1], w2.shape[1]);
        a.load_into("backbone", &mut p)?;
        Ok(p)
    }
}

/// Embed a batch of raw inputs (one per row). Row order is preserved.
pub fn extract_features(params: &BackboneParams, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if inputs.ncols() != params.input_dim() {
        return Err(Error::ShapeMismatch {
            expected: params.input_dim(),
            got: inputs.ncols(),
        });
    }
    Ok(params.forward(inputs).0)
}

pub(crate) fn stack(rows: &[&Array1<f64>], dim: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((rows.len(), dim));
    for (mut dst, src) in m.rows_mut().into_iter().zip(rows) {
        if src.len() != dim {
            return Err(Error::ShapeMismatch {
                expected: dim,
                got: src.len(),
            });
        }
        dst.assign(*src);
    }
    Ok(m)
}

/// Embed every sample of a dataset, keeping labels and order.
pub fn embed_dataset(params: &BackboneParams, data: &LabeledDataset<Array1<f64>>) -> Result<LabeledDataset<Embedding>> {
    let rows: Vec<&Array1<f64>> = data.samples().iter().map(|(x, _)| x).collect();
    let z = extract_features(params, stack(&rows, params.input_dim())?.view())?;
    Ok(LabeledDataset::new(
        z.rows()
            .into_iter()
            .zip(data.samples())
            .map(|(row, (_, y))| (row.to_owned(), *y))
            .collect(),
    ))
}

/// Mean of the embeddings carrying `target`.
pub fn class_prototype(embeddings: ArrayView2<'_, f64>, labels: &[ClassId], target: ClassId) -> Result<Embedding> {
    let mut sum = Array1::zeros(embeddings.ncols());
    let mut count = 0usize;
    for (row, &y) in embeddings.rows().into_iter().zip(labels) {
        if y == target {
            sum += &row;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyClass(target));
    }
    Ok(sum / count as f64)
}

/// Prototypes for every class of an embedded dataset, labels ascending.
pub fn dataset_prototypes(data: &LabeledDataset<Embedding>) -> Result<Vec<(ClassId, Embedding)>> {
    let dim = data.samples().first().map_or(0, |(z, _)| z.len());
    data.labels()
        .map(|c| {
            let rows: Vec<&Embedding> = data.class_indices(c).iter().map(|&i| &data.sample(i).0).collect();
            let labels = vec![c; rows.len()];
            class_prototype(stack(&rows, dim)?.view(), &labels, c).map(|p| (c, p))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub scale: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            hidden_dim: 64,
            output_dim: 16,
            epochs: 50,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            scale: 16.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub backbone: BackboneParams,
    pub head: ClassifierHead,
    /// Full base-set cross-entropy before training and after every epoch.
    pub loss_curve: Vec<f64>,
    pub train_accuracy: f64,
}

/// Cross-entropy of the cosine head over a batch, with gradients for both
/// the backbone and the head weights.
pub fn cross_entropy_grad(
    backbone: &BackboneParams,
    head: &ClassifierHead,
    x: ArrayView2<'_, f64>,
    targets: &[usize],
) -> (f64, BackboneParams, Array2<f64>) {
    let (z, cache) = backbone.forward(x);
    let ce = math::cosine_cross_entropy(z.view(), head.weights.view(), targets, head.scale);
    let grads = backbone.backward(x, &cache, ce.d_queries.view());
    (ce.loss, grads, ce.d_prototypes)
}

fn full_loss(backbone: &BackboneParams, head: &ClassifierHead, x: ArrayView2<'_, f64>, y: &[usize]) -> (f64, f64) {
    let z = backbone.forward(x).0;
    let ce = math::cosine_cross_entropy(z.view(), head.weights.view(), y, head.scale);
    let correct = z
        .rows()
        .into_iter()
        .zip(y)
        .filter(|(row, &t)| head.predict_index(*row) == t)
        .count();
    (ce.loss, correct as f64 / y.len() as f64)
}

/// Pretrain the extractor and a cosine head on the base session.
pub fn pretrain_base(stream: &SessionStream<Array1<f64>>, config: &PretrainConfig) -> Result<Pretrained> {
    let base = stream.base();
    if base.is_empty() {
        return Err(Error::ConfigInvalid("base session is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::ConfigInvalid("batch_size must be >= 1".into()));
    }
    let input_dim = base.sample(0).0.len();
    let rows: Vec<&Array1<f64>> = base.samples().iter().map(|(x, _)| x).collect();
    let x = stack(&rows, input_dim)?;
    let labels: Vec<ClassId> = base.labels().collect();
    let targets: Vec<usize> = base
        .samples()
        .iter()
        .map(|(_, y)| labels.binary_search(y).expect("label present"))
        .collect();

    let mut backbone = BackboneParams::init(input_dim, config.hidden_dim, config.output_dim, config.seed);
    let mut head = ClassifierHead::init(labels, config.output_dim, config.scale, config.seed);

    let (initial, _) = full_loss(&backbone, &head, x.view(), &targets);
    let mut loss_curve = vec![initial];
    let steps_per_epoch = base.len().div_ceil(config.batch_size);
    let schedule = CosineSchedule {
        base_lr: config.lr,
        total_steps: steps_per_epoch * config.epochs,
    };
    let mut opt_backbone = Sgd::new(config.momentum);
    let mut opt_head = Sgd::new(config.momentum);
    let mut order: Vec<usize> = (0..base.len()).collect();
    let mut rng = seed::rng(config.seed, tag::PRETRAIN_SHUFFLE);
    let mut step = 0;
    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let xb = x.select(Axis(0), batch);
            let yb: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let (loss, g_backbone, g_head) = cross_entropy_grad(&backbone, &head, xb.view(), &yb);
            if !loss.is_finite() {
                return Err(Error::DivergedLoss {
                    stage: "pretrain",
                    value: loss,
                });
            }
            let lr = schedule.lr(step);
            opt_backbone.step(&mut backbone, &g_backbone, lr);
            let mut head_grad = head.clone();
            head_grad.weights = g_head;
            opt_head.step(&mut head, &head_grad, lr);
            step += 1;
        }
        let (loss, _) = full_loss(&backbone, &head, x.view(), &targets);
        if !loss.is_finite() {
            return Err(Error::DivergedLoss {
                stage: "pretrain",
                value: loss,
            });
        }
        loss_curve.push(loss);
    }
    let (_, train_accuracy) = full_loss(&backbone, &head, x.view(), &targets);
    Ok(Pretrained {
        backbone,
        head,
        loss_curve,
        train_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{build_session_stream, ProtocolConfig};
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_stream(classes: u32, per_class: usize, dim: usize) -> SessionStream<Array1<f64>> {
        let mut rng = seed::rng(11, 0);
        let mut samples = Vec::new();
        for c in 0..classes {
            let mut mean = Array1::<f64>::zeros(dim);
            mean[c as usize % dim] = 6.0;
            for _ in 0..per_class {
                let noise: Array1<f64> = Array1::from_shape_simple_fn(dim, || StandardNormal.sample(&mut rng));
                samples.push((&mean + &noise, ClassId(c)));
            }
        }
        let cfg = ProtocolConfig {
            base_class_count: classes as usize,
            session_count: 0,
            ..ProtocolConfig::default()
        };
        build_session_stream(&LabeledDataset::new(samples), &cfg).unwrap()
    }

    #[test]
    fn shapes_and_determinism() {
        let p = BackboneParams::init(3, 8, 5, 1);
        let x = array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [0.0, 0.0, 1.0], [-1.0, 0.5, 0.0]];
        let z = extract_features(&p, x.view()).unwrap();
        assert_eq!(z.shape(), &[4, 5]);
        assert_eq!(z.row(0), z.row(1));
        assert!(matches!(
            extract_features(&p, array![[1.0, 2.0]].view()),
            Err(Error::ShapeMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn zero_weights_give_zero_embeddings() {
        let mut p = BackboneParams::init(3, 4, 2, 0);
        p.fill(0.0);
        let z = extract_features(&p, array![[1.0, -4.0, 2.0]].view()).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prototype_examples() {
        let z = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [9.0, 9.0]];
        let y = [ClassId(0), ClassId(0), ClassId(0), ClassId(1)];
        let p = class_prototype(z.view(), &y, ClassId(0)).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(class_prototype(z.view(), &y, ClassId(1)).unwrap(), array![9.0, 9.0]);
        let sym = array![[0.3, -2.0], [-0.3, 2.0]];
        let p = class_prototype(sym.view(), &[ClassId(4); 2], ClassId(4)).unwrap();
        assert!(p.iter().all(|&v| v == 0.0));
        assert!(matches!(
            class_prototype(z.view(), &y, ClassId(2)),
            Err(Error::EmptyClass(ClassId(2)))
        ));
    }

    #[test]
    fn pretraining_separates_gaussians() {
        let stream = gaussian_stream(6, 60, 8);
        let cfg = PretrainConfig {
            epochs: 50,
            ..PretrainConfig::default()
        };
        let out = pretrain_base(&stream, &cfg).unwrap();
        assert_eq!(out.loss_curve.len(), 51);
        assert!(out.loss_curve.last().unwrap() <= &out.loss_curve[0]);
        assert!(out.train_accuracy >= 0.95, "accuracy {}", out.train_accuracy);
    }

    #[test]
    fn zero_epochs_leave_init_untouched() {
        let stream = gaussian_stream(3, 10, 4);
        let cfg = PretrainConfig {
            epochs: 0,
            hidden_dim: 6,
            output_dim: 3,
            ..PretrainConfig::default()
        };
        let out = pretrain_base(&stream, &cfg).unwrap();
        assert_eq!(out.backbone, BackboneParams::init(4, 6, 3, cfg.seed));
        assert_eq!(out.loss_curve.len(), 1);
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let stream = gaussian_stream(3, 10, 4);
        let cfg = PretrainConfig {
            epochs: 4,
            lr: 0.0,
            ..PretrainConfig::default()
        };
        let out = pretrain_base(&stream, &cfg).unwrap();
        assert!(out.loss_curve.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn checkpoint_is_bit_exact() {
        let p = BackboneParams::init(5, 7, 3, 42);
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        let back = BackboneParams::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.fingerprint(), p.fingerprint());
        assert_eq!(back, p);
    }
}
