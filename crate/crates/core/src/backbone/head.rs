use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::math;
use crate::protocol::ClassId;
use crate::seed::{self, tag};
use crate::tensor::{TensorVisitor, Tensors};

/// Cosine classifier: `logit_c = scale * cos(z, w_c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub labels: Vec<ClassId>,
    pub weights: Array2<f64>,
    pub scale: f64,
}

impl Tensors for ClassifierHead {
    fn visit(&self, f: &mut TensorVisitor<'_>) {
        f("weights", self.weights.shape(), self.weights.as_slice().unwrap());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("weights", self.weights.as_slice_mut().unwrap());
    }
}

impl ClassifierHead {
    pub fn init(labels: Vec<ClassId>, dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = seed::rng(seed, tag::HEAD_INIT);
        let bound = 1.0 / (dim as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((labels.len(), dim), || rng.random_range(-bound..=bound));
        ClassifierHead { labels, weights, scale }
    }

    /// Append randomly initialised rows for `labels`.
    pub fn extend(&mut self, labels: &[ClassId], seed: u64) {
        let dim = self.weights.ncols();
        let mut rng = seed::rng(seed, tag::HEAD_INIT);
        let bound = 1.0 / (dim as f64).sqrt();
        let mut w = Array2::zeros((self.labels.len() + labels.len(), dim));
        w.slice_mut(ndarray::s![..self.labels.len(), ..]).assign(&self.weights);
        for i in self.labels.len()..w.nrows() {
            for v in w.row_mut(i) {
                *v = rng.random_range(-bound..=bound);
            }
        }
        self.weights = w;
        self.labels.extend_from_slice(labels);
    }

    pub fn logits(&self, z: ArrayView1<'_, f64>) -> Array1<f64> {
        let zn = math::norm(z);
        self.weights
            .rows()
            .into_iter()
            .map(|w| self.scale * z.dot(&w) / (zn * math::norm(w)))
            .collect()
    }

    /// Argmax row index, ties to the first.
    pub fn predict_index(&self, z: ArrayView1<'_, f64>) -> usize {
        let logits = self.logits(z);
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        best
    }

    pub fn predict(&self, z: ArrayView1<'_, f64>) -> ClassId {
        self.labels[self.predict_index(z)]
    }
}
