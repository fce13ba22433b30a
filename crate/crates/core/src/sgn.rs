//! Sample-level graph network.
//!
//! Nodes are the embeddings of one few-shot task. The edge weight between two
//! nodes is `e_ij = sigmoid(phi(z_i - z_j))` where `phi` is two blocks of
//! affine map, layer normalisation and ReLU followed by a scalar readout.
//! Nodes are refined by `z_i <- z_i + sum_j e_ij z_j` (self-edges included,
//! edges re-encoded every round) and averaged per class.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::{uniform_matrix, uniform_vector};
use crate::protocol::ClassId;
use crate::seed::{self, tag};
use crate::tensor::{TensorVisitor, Tensors};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeEncoderParams {
    pub a1: Array2<f64>,
    pub c1: Array1<f64>,
    pub a2: Array2<f64>,
    pub c2: Array1<f64>,
    pub w: Array1<f64>,
    pub b: Array1<f64>,
}

impl Tensors for EdgeEncoderParams {
    fn visit(&self, f: &mut TensorVisitor<'_>) {
        f("a1", self.a1.shape(), self.a1.as_slice().unwrap());
        f("c1", self.c1.shape(), self.c1.as_slice().unwrap());
        f("a2", self.a2.shape(), self.a2.as_slice().unwrap());
        f("c2", self.c2.shape(), self.c2.as_slice().unwrap());
        f("w", self.w.shape(), self.w.as_slice().unwrap());
        f("b", self.b.shape(), self.b.as_slice().unwrap());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("a1", self.a1.as_slice_mut().unwrap());
        f("c1", self.c1.as_slice_mut().unwrap());
        f("a2", self.a2.as_slice_mut().unwrap());
        f("c2", self.c2.as_slice_mut().unwrap());
        f("w", self.w.as_slice_mut().unwrap());
        f("b", self.b.as_slice_mut().unwrap());
    }
}

impl EdgeEncoderParams {
    /// `readout_bias` sets the initial edge level `sigmoid(readout_bias)`;
    /// a strongly negative value starts the network close to plain class means.
    pub fn init(dim: usize, hidden: usize, readout_bias: f64, seed: u64) -> Self {
        let mut rng = seed::rng(seed, tag::EDGE_INIT);
        let bd = 1.0 / (dim as f64).sqrt();
        let bh = 1.0 / (hidden as f64).sqrt();
        EdgeEncoderParams {
            a1: uniform_matrix(&mut rng, dim, hidden, bd),
            c1: uniform_vector(&mut rng, hidden, bd),
            a2: uniform_matrix(&mut rng, hidden, hidden, bh),
            c2: uniform_vector(&mut rng, hidden, bh),
            w: uniform_vector(&mut rng, hidden, bh),
            b: Array1::from_elem(1, readout_bias),
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        EdgeEncoderParams {
            a1: Array2::zeros((dim, hidden)),
            c1: Array1::zeros(hidden),
            a2: Array2::zeros((hidden, hidden)),
            c2: Array1::zeros(hidden),
            w: Array1::zeros(hidden),
            b: Array1::zeros(1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim(), self.hidden())
    }

    pub fn dim(&self) -> usize {
        self.a1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.a1.ncols()
    }
}

/// How edge weights are produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EdgeMode {
    Learned,
    /// Every edge is this constant in `[0, 1]`; no gradient reaches `phi`.
    Clamped(f64),
}

fn layer_norm(a: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let h = a.ncols() as f64;
    let mut out = a.clone();
    let mut sigmas = Array1::zeros(a.nrows());
    for (mut row, s) in out.rows_mut().into_iter().zip(sigmas.iter_mut()) {
        let mean = row.sum() / h;
        row -= mean;
        let var = row.dot(&row) / h;
        *s = (var + LN_EPS).sqrt();
        row /= *s;
    }
    (out, sigmas)
}

fn layer_norm_backward(normed: &Array2<f64>, sigmas: &Array1<f64>, grad: Array2<f64>) -> Array2<f64> {
    let h = normed.ncols() as f64;
    let mut out = grad;
    for ((mut g, n), &s) in out.rows_mut().into_iter().zip(normed.rows()).zip(sigmas) {
        let mean_g = g.sum() / h;
        let mean_gn = g.dot(&n) / h;
        g -= mean_g;
        g.scaled_add(-mean_gn, &n);
        g /= s;
    }
    out
}

/// Forward cache of `phi` over a batch of difference vectors (one per row).
#[derive(Debug, Clone)]
struct PhiBatch {
    u: Array2<f64>,
    n1: Array2<f64>,
    s1: Array1<f64>,
    r1: Array2<f64>,
    n2: Array2<f64>,
    s2: Array1<f64>,
    r2: Array2<f64>,
    e: Array1<f64>,
}

fn phi_forward(p: &EdgeEncoderParams, u: Array2<f64>) -> PhiBatch {
    let (n1, s1) = layer_norm(&(u.dot(&p.a1) + &p.c1));
    let r1 = n1.mapv(|v| v.max(0.0));
    let (n2, s2) = layer_norm(&(r1.dot(&p.a2) + &p.c2));
    let r2 = n2.mapv(|v| v.max(0.0));
    let e = (r2.dot(&p.w) + p.b[0]).mapv(|s| 1.0 / (1.0 + (-s).exp()));
    PhiBatch {
        u,
        n1,
        s1,
        r1,
        n2,
        s2,
        r2,
        e,
    }
}

/// Accumulates parameter gradients into `grads`, returns `d u`.
fn phi_backward(
    p: &EdgeEncoderParams,
    c: &PhiBatch,
    de: ArrayView1<'_, f64>,
    grads: &mut EdgeEncoderParams,
) -> Array2<f64> {
    let ds: Array1<f64> = c.e.iter().zip(de).map(|(&e, &g)| g * e * (1.0 - e)).collect();
    grads.w += &c.r2.t().dot(&ds);
    grads.b[0] += ds.sum();
    let mut dn2 = ds.view().insert_axis(Axis(1)).dot(&p.w.view().insert_axis(Axis(0)));
    dn2.zip_mut_with(&c.n2, |g, &n| {
        if n <= 0.0 {
            *g = 0.0
        }
    });
    let da2 = layer_norm_backward(&c.n2, &c.s2, dn2);
    grads.a2 += &c.r1.t().dot(&da2);
    grads.c2 += &da2.sum_axis(Axis(0));
    let mut dn1 = da2.dot(&p.a2.t());
    dn1.zip_mut_with(&c.n1, |g, &n| {
        if n <= 0.0 {
            *g = 0.0
        }
    });
    let da1 = layer_norm_backward(&c.n1, &c.s1, dn1);
    grads.a1 += &c.u.t().dot(&da1);
    grads.c1 += &da1.sum_axis(Axis(0));
    da1.dot(&p.a1.t())
}

/// Edge weight between two embeddings.
pub fn edge_encode(params: &EdgeEncoderParams, zi: ArrayView1<'_, f64>, zj: ArrayView1<'_, f64>) -> Result<f64> {
    for z in [zi, zj] {
        if z.len() != params.dim() {
            return Err(Error::DimensionMismatch {
                expected: params.dim(),
                got: z.len(),
            });
        }
    }
    let u = (&zi - &zj).insert_axis(Axis(0));
    Ok(phi_forward(params, u).e[0])
}

fn pair_differences(z: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = z.nrows();
    let mut u = Array2::zeros((n * n, z.ncols()));
    for i in 0..n {
        for j in 0..n {
            let mut row = u.row_mut(i * n + j);
            row.assign(&z.row(i));
            row -= &z.row(j);
        }
    }
    u
}

fn encode_all(params: &EdgeEncoderParams, z: ArrayView2<'_, f64>, mode: EdgeMode) -> (Array2<f64>, Option<PhiBatch>) {
    let n = z.nrows();
    match mode {
        EdgeMode::Clamped(v) => (Array2::from_elem((n, n), v), None),
        EdgeMode::Learned => {
            let c = phi_forward(params, pair_differences(z));
            let edges = c.e.clone().into_shape_with_order((n, n)).expect("n*n edges");
            (edges, Some(c))
        }
    }
}

/// Fully connected graph over one task's embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGraph {
    pub nodes: Array2<f64>,
    pub edges: Array2<f64>,
    pub labels: Vec<ClassId>,
}

impl SampleGraph {
    pub fn len(&self) -> usize {
        self.nodes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.nrows() == 0
    }

    /// `i j weight` per line, weights to 6 decimals.
    pub fn write_adjacency(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "# nodes {}", self.len())?;
        for ((i, j), e) in self.edges.indexed_iter() {
            writeln!(w, "{i} {j} {e:.6}")?;
        }
        Ok(())
    }
}

pub fn build_sample_graph(
    params: &EdgeEncoderParams,
    embeddings: ArrayView2<'_, f64>,
    labels: &[ClassId],
    mode: EdgeMode,
) -> Result<SampleGraph> {
    if embeddings.ncols() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            got: embeddings.ncols(),
        });
    }
    if labels.len() != embeddings.nrows() || labels.is_empty() {
        return Err(Error::ShapeMismatch {
            expected: embeddings.nrows().max(1),
            got: labels.len(),
        });
    }
    let (edges, _) = encode_all(params, embeddings, mode);
    Ok(SampleGraph {
        nodes: embeddings.to_owned(),
        edges,
        labels: labels.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedClassFeature {
    pub label: ClassId,
    pub values: Array1<f64>,
}

#[derive(Debug, Clone)]
struct Round {
    nodes: Array2<f64>,
    edges: Array2<f64>,
    phi: Option<PhiBatch>,
}

/// Output of [`refine_class_features`] plus what backprop needs.
#[derive(Debug, Clone)]
pub struct Refinement {
    /// One feature per class, labels ascending.
    pub features: Vec<RefinedClassFeature>,
    members: Vec<Vec<usize>>,
    rounds: Vec<Round>,
    mode: EdgeMode,
}

impl Refinement {
    pub fn feature_matrix(&self) -> Array2<f64> {
        let d = self.features.first().map_or(0, |f| f.values.len());
        let mut m = Array2::zeros((self.features.len(), d));
        for (mut row, f) in m.rows_mut().into_iter().zip(&self.features) {
            row.assign(&f.values);
        }
        m
    }

    /// Final refined node embeddings.
    pub fn refined_nodes(&self) -> Array2<f64> {
        let last = self.rounds.last().expect("at least one round");
        &last.nodes + &last.edges.dot(&last.nodes)
    }

    /// Given `dL/dp_c` (rows in `features` order) return `dL/dphi` and
    /// `dL/dz` for the original graph nodes.
    pub fn backward(
        &self,
        params: &EdgeEncoderParams,
        d_features: ArrayView2<'_, f64>,
    ) -> (EdgeEncoderParams, Array2<f64>) {
        self.backward_with_nodes(params, d_features, None)
    }

    /// As [`Refinement::backward`], plus an optional gradient with respect
    /// to [`Refinement::refined_nodes`].
    pub fn backward_with_nodes(
        &self,
        params: &EdgeEncoderParams,
        d_features: ArrayView2<'_, f64>,
        d_nodes: Option<ArrayView2<'_, f64>>,
    ) -> (EdgeEncoderParams, Array2<f64>) {
        let first = &self.rounds[0].nodes;
        let n = first.nrows();
        let mut grads = params.zeros_like();
        let mut dz = match d_nodes {
            Some(d) => d.to_owned(),
            None => Array2::zeros(first.raw_dim()),
        };
        for (c, members) in self.members.iter().enumerate() {
            let k = members.len() as f64;
            for &i in members {
                dz.row_mut(i).scaled_add(1.0 / k, &d_features.row(c));
            }
        }
        for round in self.rounds.iter().rev() {
            let mut d_prev = &dz + &round.edges.t().dot(&dz);
            if let (EdgeMode::Learned, Some(phi)) = (self.mode, &round.phi) {
                let de = dz.dot(&round.nodes.t());
                let de = de.into_shape_with_order(n * n).expect("n*n");
                let du = phi_backward(params, phi, de.view(), &mut grads);
                for i in 0..n {
                    for j in 0..n {
                        let g = du.row(i * n + j);
                        d_prev.row_mut(i).scaled_add(1.0, &g);
                        d_prev.row_mut(j).scaled_add(-1.0, &g);
                    }
                }
            }
            dz = d_prev;
        }
        (grads, dz)
    }
}

/// Aggregate neighbours for `rounds` rounds and average per class.
///
/// With one round this is `p_c = (1/K) sum_{i in c} (z_i + sum_j e_ij z_j)`
/// where `j` ranges over every node of the graph.
pub fn refine_class_features(
    params: &EdgeEncoderParams,
    graph: &SampleGraph,
    rounds: usize,
    mode: EdgeMode,
) -> Result<Refinement> {
    if rounds == 0 {
        return Err(Error::ConfigInvalid("sgn rounds must be >= 1".into()));
    }
    let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (i, &y) in graph.labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let k = by_class.values().next().map_or(0, Vec::len);
    if let Some((&class, m)) = by_class.iter().find(|(_, m)| m.len() != k) {
        return Err(Error::UnevenClassSizes {
            class,
            expected: k,
            got: m.len(),
        });
    }

    let mut trace = Vec::with_capacity(rounds);
    let mut z = graph.nodes.clone();
    for _ in 0..rounds {
        let (edges, phi) = encode_all(params, z.view(), mode);
        let next = &z + &edges.dot(&z);
        trace.push(Round { nodes: z, edges, phi });
        z = next;
    }

    let mut features = Vec::with_capacity(by_class.len());
    let mut members = Vec::with_capacity(by_class.len());
    for (label, idx) in by_class {
        let mut sum = Array1::zeros(z.ncols());
        for &i in &idx {
            sum += &z.row(i);
        }
        features.push(RefinedClassFeature {
            label,
            values: sum / idx.len() as f64,
        });
        members.push(idx);
    }
    Ok(Refinement {
        features,
        members,
        rounds: trace,
        mode,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mining {
    AllTriplets,
    BatchHard,
}

/// Which sample embeddings the triplet loss sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TripletInput {
    /// Backbone embeddings, before any aggregation.
    #[default]
    Raw,
    /// Node embeddings after the last aggregation round.
    Refined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
    pub mining: Mining,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            margin: 0.5,
            mining: Mining::BatchHard,
        }
    }
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mined `(anchor, positive, negative)` index triples.
pub fn mine_triplets(
    embeddings: ArrayView2<'_, f64>,
    labels: &[ClassId],
    mining: Mining,
) -> Vec<(usize, usize, usize)> {
    let n = embeddings.nrows();
    let mut out = Vec::new();
    for a in 0..n {
        let za = embeddings.row(a);
        let pos = (0..n).filter(|&p| p != a && labels[p] == labels[a]);
        let neg = || (0..n).filter(|&q| labels[q] != labels[a]);
        match mining {
            Mining::AllTriplets => {
                for p in pos {
                    out.extend(neg().map(|q| (a, p, q)));
                }
            }
            Mining::BatchHard => {
                let hardest_pos =
                    pos.map(|p| (p, sq_dist(za, embeddings.row(p))))
                        .fold(None, |best: Option<(usize, f64)>, c| match best {
                            Some(b) if b.1 >= c.1 => Some(b),
                            _ => Some(c),
                        });
                let hardest_neg =
                    neg()
                        .map(|q| (q, sq_dist(za, embeddings.row(q))))
                        .fold(None, |best: Option<(usize, f64)>, c| match best {
                            Some(b) if b.1 <= c.1 => Some(b),
                            _ => Some(c),
                        });
                if let (Some((p, _)), Some((q, _))) = (hardest_pos, hardest_neg) {
                    out.push((a, p, q));
                }
            }
        }
    }
    out
}

/// Mean hinge `max(0, |z_a - z_p|^2 - |z_a - z_n|^2 + m)` over mined
/// triplets, and its gradient w.r.t. the embeddings (0 at the kink).
pub fn triplet_loss_grad(
    embeddings: ArrayView2<'_, f64>,
    labels: &[ClassId],
    config: &TripletConfig,
) -> Result<(f64, Array2<f64>)> {
    if labels.len() != embeddings.nrows() {
        return Err(Error::ShapeMismatch {
            expected: embeddings.nrows(),
            got: labels.len(),
        });
    }
    if config.margin < 0.0 {
        return Err(Error::ConfigInvalid(format!(
            "margin must be >= 0, got {}",
            config.margin
        )));
    }
    let triplets = mine_triplets(embeddings, labels, config.mining);
    if triplets.is_empty() {
        return Err(Error::NoValidTriplet);
    }
    let scale = 1.0 / triplets.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(embeddings.raw_dim());
    for &(a, p, q) in &triplets {
        let (za, zp, zq) = (embeddings.row(a), embeddings.row(p), embeddings.row(q));
        let hinge = sq_dist(za, zp) - sq_dist(za, zq) + config.margin;
        if hinge > 0.0 {
            loss += hinge;
            let dap = &za - &zp;
            let daq = &za - &zq;
            grad.row_mut(a).scaled_add(2.0 * scale, &(&dap - &daq));
            grad.row_mut(p).scaled_add(-2.0 * scale, &dap);
            grad.row_mut(q).scaled_add(2.0 * scale, &daq);
        }
    }
    Ok((loss * scale, grad))
}

pub fn triplet_loss(embeddings: ArrayView2<'_, f64>, labels: &[ClassId], config: &TripletConfig) -> Result<f64> {
    triplet_loss_grad(embeddings, labels, config).map(|(l, _)| l)
}
