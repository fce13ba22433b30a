//! Class-level graph network.
//!
//! The class graph holds one feature vector per class seen so far, joined by
//! cosine-similarity edges. New classes are calibrated by scaled dot-product
//! attention over every node (old classes are read-only context):
//!
//! ```text
//! v = p_sgn,  k = W_k^T v,  q = W_q^T v
//! p_cgn = p_sgn + sum_n softmax_n(q . k_n / sqrt(d)) v_n
//! ```
//!
//! Prediction is the nearest node by cosine similarity.

mod snapshot;

use std::collections::BTreeSet;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::backbone::{stack, uniform_matrix};
use crate::math;
use crate::protocol::{ClassId, LabelSet};
use crate::seed::{self, tag};
use crate::sgn::RefinedClassFeature;
use crate::tensor::{TensorVisitor, Tensors};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassNode {
    pub label: ClassId,
    pub session: usize,
    pub values: Array1<f64>,
}

/// Immutable class graph; updates return a new graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGraph {
    nodes: Vec<ClassNode>,
    edges: Array2<f64>,
}

impl Default for ClassGraph {
    fn default() -> Self {
        ClassGraph {
            nodes: Vec::new(),
            edges: Array2::zeros((0, 0)),
        }
    }
}

impl ClassGraph {
    pub fn from_nodes(nodes: Vec<ClassNode>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let dim = nodes.first().map_or(0, |n| n.values.len());
        for n in &nodes {
            if !seen.insert(n.label) {
                return Err(Error::DuplicateLabel(n.label));
            }
            if n.values.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: n.values.len(),
                });
            }
            let len = math::norm(n.values.view());
            if len == 0.0 || !len.is_finite() {
                return Err(Error::ZeroNormPrototype(n.label));
            }
        }
        let values: Vec<&Array1<f64>> = nodes.iter().map(|n| &n.values).collect();
        let edges = math::cosine_matrix(stack(&values, dim)?.view());
        Ok(ClassGraph { nodes, edges })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[ClassNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &Array2<f64> {
        &self.edges
    }

    pub fn dim(&self) -> Option<usize> {
        self.nodes.first().map(|n| n.values.len())
    }

    pub fn labels(&self) -> LabelSet {
        self.nodes.iter().map(|n| n.label).collect()
    }

    pub fn node(&self, label: ClassId) -> Option<&ClassNode> {
        self.nodes.iter().find(|n| n.label == label)
    }

    pub fn contains(&self, label: ClassId) -> bool {
        self.node(label).is_some()
    }

    pub fn value_matrix(&self) -> Array2<f64> {
        let d = self.dim().unwrap_or(0);
        let mut m = Array2::zeros((self.len(), d));
        for (mut row, n) in m.rows_mut().into_iter().zip(&self.nodes) {
            row.assign(&n.values);
        }
        m
    }

    /// Copy of the graph with `labels` removed.
    pub fn without(&self, labels: &LabelSet) -> ClassGraph {
        let nodes: Vec<ClassNode> = self
            .nodes
            .iter()
            .filter(|n| !labels.contains(&n.label))
            .cloned()
            .collect();
        ClassGraph::from_nodes(nodes).expect("subset of a valid graph is valid")
    }
}

/// Base graph over session-0 prototypes.
pub fn build_base_graph(prototypes: &[(ClassId, Array1<f64>)]) -> Result<ClassGraph> {
    if prototypes.is_empty() {
        return Err(Error::EmptyGraph);
    }
    ClassGraph::from_nodes(
        prototypes
            .iter()
            .map(|(label, v)| ClassNode {
                label: *label,
                session: 0,
                values: v.clone(),
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wk: Array2<f64>,
    pub wq: Array2<f64>,
    pub head_count: usize,
}

impl Tensors for AttentionParams {
    fn visit(&self, f: &mut TensorVisitor<'_>) {
        f("wk", self.wk.shape(), self.wk.as_slice().unwrap());
        f("wq", self.wq.shape(), self.wq.as_slice().unwrap());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("wk", self.wk.as_slice_mut().unwrap());
        f("wq", self.wq.as_slice_mut().unwrap());
    }
}

impl AttentionParams {
    pub fn identity(dim: usize, head_count: usize) -> Self {
        AttentionParams {
            wk: Array2::eye(dim),
            wq: Array2::eye(dim),
            head_count,
        }
    }

    /// Uniform fan-in init, optionally added on top of the identity.
    pub fn init(dim: usize, head_count: usize, with_identity: bool, noise: f64, seed: u64) -> Self {
        let mut rng = seed::rng(seed, tag::ATTENTION_INIT);
        let bound = noise / (dim as f64).sqrt();
        let mut p = AttentionParams {
            wk: uniform_matrix(&mut rng, dim, dim, bound),
            wq: uniform_matrix(&mut rng, dim, dim, bound),
            head_count,
        };
        if with_identity {
            p.wk += &Array2::eye(dim);
            p.wq += &Array2::eye(dim);
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        AttentionParams {
            wk: Array2::zeros(self.wk.raw_dim()),
            wq: Array2::zeros(self.wq.raw_dim()),
            head_count: self.head_count,
        }
    }

    pub fn dim(&self) -> usize {
        self.wk.nrows()
    }
}

/// How attention weights are normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationMode {
    /// Row softmax over all nodes.
    Softmax,
    /// Raw `q . k / sqrt(d)` weights, no normalisation.
    #[default]
    Literal,
    /// Pass-through: `p_cgn = p_sgn`.
    Disabled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedClassFeature {
    pub label: ClassId,
    pub values: Array1<f64>,
}

/// Output of [`calibrate`] plus the cache needed for backprop.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub features: Vec<CalibratedClassFeature>,
    context_len: usize,
    inputs: Array2<f64>,
    values: Array2<f64>,
    queries: Array2<f64>,
    keys: Array2<f64>,
    weights: Vec<Array2<f64>>,
    mode: CalibrationMode,
}

impl Calibration {
    pub fn feature_matrix(&self) -> Array2<f64> {
        let d = self.inputs.ncols();
        let mut m = Array2::zeros((self.features.len(), d));
        for (mut row, f) in m.rows_mut().into_iter().zip(&self.features) {
            row.assign(&f.values);
        }
        m
    }

    /// Attention weights of head `h` (new classes x all nodes, context first).
    pub fn attention(&self, head: usize) -> Option<&Array2<f64>> {
        self.weights.get(head)
    }

    /// Given `dL/dp_cgn` return `dL/dW` and `dL/dp_sgn`.
    pub fn backward(&self, params: &AttentionParams, d_out: ArrayView2<'_, f64>) -> (AttentionParams, Array2<f64>) {
        let mut grads = params.zeros_like();
        let mut d_inputs = d_out.to_owned();
        if self.mode == CalibrationMode::Disabled {
            return (grads, d_inputs);
        }
        let d = params.dim();
        let dh = d / params.head_count;
        let scale = (dh as f64).sqrt();
        let mut d_values = Array2::<f64>::zeros(self.values.raw_dim());
        let mut d_queries = Array2::<f64>::zeros(self.queries.raw_dim());
        let mut d_keys = Array2::<f64>::zeros(self.keys.raw_dim());
        for (h, a) in self.weights.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let g = d_out.slice(cols);
            let v = self.values.slice(cols);
            let da = g.dot(&v.t());
            d_values.slice_mut(cols).scaled_add(1.0, &a.t().dot(&g));
            let ds = match self.mode {
                CalibrationMode::Softmax => {
                    let mut ds = &da * a;
                    for (mut row, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                        let dot = row.sum();
                        row.scaled_add(-dot, &arow);
                    }
                    ds
                }
                _ => da,
            };
            let k = self.keys.slice(cols);
            let q = self.queries.slice(cols);
            d_queries.slice_mut(cols).scaled_add(1.0 / scale, &ds.dot(&k));
            d_keys.slice_mut(cols).scaled_add(1.0 / scale, &ds.t().dot(&q));
        }
        grads.wq = self.inputs.t().dot(&d_queries);
        d_inputs += &d_queries.dot(&params.wq.t());
        grads.wk = self.values.t().dot(&d_keys);
        d_values += &d_keys.dot(&params.wk.t());
        d_inputs += &d_values.slice(s![self.context_len.., ..]);
        (grads, d_inputs)
    }
}

/// Calibrate new class features against every node of `graph`.
pub fn calibrate(
    graph: &ClassGraph,
    new_features: &[RefinedClassFeature],
    params: &AttentionParams,
    mode: CalibrationMode,
) -> Result<Calibration> {
    let d = params.dim();
    if params.head_count == 0 || !d.is_multiple_of(params.head_count) {
        return Err(Error::ConfigInvalid(format!(
            "head_count {} must divide dim {d}",
            params.head_count
        )));
    }
    if let Some(gd) = graph.dim() {
        if gd != d {
            return Err(Error::DimensionMismatch { expected: d, got: gd });
        }
    }
    let mut seen = BTreeSet::new();
    for f in new_features {
        if graph.contains(f.label) {
            return Err(Error::LabelCollision(f.label));
        }
        if !seen.insert(f.label) {
            return Err(Error::DuplicateLabel(f.label));
        }
        if f.values.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: f.values.len(),
            });
        }
    }

    let rows: Vec<&Array1<f64>> = new_features.iter().map(|f| &f.values).collect();
    let inputs = stack(&rows, d)?;
    let context = graph.value_matrix();
    let context_len = context.nrows();
    let mut values = Array2::zeros((context_len + inputs.nrows(), d));
    if context_len > 0 {
        values.slice_mut(s![..context_len, ..]).assign(&context);
    }
    values.slice_mut(s![context_len.., ..]).assign(&inputs);

    let mut out = inputs.clone();
    let mut weights = Vec::new();
    let (queries, keys) = if mode == CalibrationMode::Disabled {
        (Array2::zeros((0, d)), Array2::zeros((0, d)))
    } else {
        let queries = inputs.dot(&params.wq);
        let keys = values.dot(&params.wk);
        let dh = d / params.head_count;
        let scale = (dh as f64).sqrt();
        for h in 0..params.head_count {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut a = queries.slice(cols).dot(&keys.slice(cols).t()) / scale;
            if mode == CalibrationMode::Softmax {
                for mut row in a.rows_mut() {
                    math::softmax_in_place(row.as_slice_mut().expect("contiguous row"));
                }
            }
            out.slice_mut(cols).scaled_add(1.0, &a.dot(&values.slice(cols)));
            weights.push(a);
        }
        (queries, keys)
    };

    let features = new_features
        .iter()
        .zip(out.rows())
        .map(|(f, row)| CalibratedClassFeature {
            label: f.label,
            values: row.to_owned(),
        })
        .collect();
    Ok(Calibration {
        features,
        context_len,
        inputs,
        values,
        queries,
        keys,
        weights,
        mode,
    })
}

/// Append calibrated nodes for `session`; edges are recomputed.
pub fn insert_calibrated(
    graph: &ClassGraph,
    calibrated: &[CalibratedClassFeature],
    session: usize,
) -> Result<ClassGraph> {
    if calibrated.is_empty() {
        return Ok(graph.clone());
    }
    let mut nodes = graph.nodes.clone();
    for c in calibrated {
        if graph.contains(c.label) {
            return Err(Error::LabelCollision(c.label));
        }
        nodes.push(ClassNode {
            label: c.label,
            session,
            values: c.values.clone(),
        });
    }
    ClassGraph::from_nodes(nodes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: ClassId,
    /// Cosine score per node, in graph order.
    pub scores: Vec<(ClassId, f64)>,
}

/// Nearest node by cosine; ties go to the smallest label.
pub fn predict(graph: &ClassGraph, query: ArrayView1<'_, f64>) -> Result<Prediction> {
    if graph.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let qn = math::norm(query);
    if qn == 0.0 {
        return Err(Error::ZeroNormQuery);
    }
    if let Some(d) = graph.dim() {
        if d != query.len() {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: query.len(),
            });
        }
    }
    let scores: Vec<(ClassId, f64)> = graph
        .nodes
        .iter()
        .map(|n| (n.label, query.dot(&n.values) / (qn * math::norm(n.values.view()))))
        .collect();
    let mut best = scores[0];
    for &(label, score) in &scores[1..] {
        if score > best.1 || (score == best.1 && label < best.0) {
            best = (label, score);
        }
    }
    Ok(Prediction { label: best.0, scores })
}

/// Mean cross-entropy of `softmax(scale * cos(z_i, node_c))` against the true
/// labels.
pub fn cgn_loss(embeddings: ArrayView2<'_, f64>, labels: &[ClassId], graph: &ClassGraph, scale: f64) -> Result<f64> {
    let targets = targets_in(graph, labels)?;
    for row in embeddings.rows() {
        if math::norm(row) == 0.0 {
            return Err(Error::ZeroNormQuery);
        }
    }
    Ok(math::cosine_cross_entropy(embeddings, graph.value_matrix().view(), &targets, scale).loss)
}

/// Row index in `graph` of each label.
pub fn targets_in(graph: &ClassGraph, labels: &[ClassId]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|y| {
            graph
                .nodes
                .iter()
                .position(|n| n.label == *y)
                .ok_or(Error::UnknownLabel(*y))
        })
        .collect()
}
