//! The joint objective `L = L_SGN + alpha * L_CGN` over one batch of tasks.

use ndarray::{s, Array2};

use crate::cgn::{calibrate, AttentionParams, CalibrationMode, ClassGraph};
use crate::math;
use crate::protocol::ClassId;
use crate::sgn::{
    build_sample_graph, refine_class_features, triplet_loss_grad, EdgeEncoderParams, EdgeMode, TripletConfig,
    TripletInput,
};
use crate::{Error, Result};

pub fn total_loss(l_sgn: f64, l_cgn: f64, alpha: f64) -> f64 {
    l_sgn + alpha * l_cgn
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub rounds: usize,
    pub edge_mode: EdgeMode,
    pub calibration: CalibrationMode,
    pub triplet: TripletConfig,
    pub triplet_input: TripletInput,
    pub scale: f64,
    pub alpha: f64,
}

/// Support sets (one sample graph each) and the queries scored against the
/// calibrated classes plus the context graph.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub supports: Vec<(Array2<f64>, Vec<ClassId>)>,
    pub queries: Array2<f64>,
    pub query_labels: Vec<ClassId>,
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutcome {
    pub l_sgn: f64,
    pub l_cgn: f64,
    pub total: f64,
    pub grad_edge: EdgeEncoderParams,
    pub grad_attention: AttentionParams,
    /// `dL/dz` per support set.
    pub grad_supports: Vec<Array2<f64>>,
    pub grad_queries: Array2<f64>,
}

/// Forward and backward pass of the joint objective.
///
/// `L_SGN` is the mean triplet loss over the support sets that admit a
/// triplet (0 if none does), taken on raw or refined node embeddings. `L_CGN` is the cosine cross-entropy of the
/// queries against `context` nodes followed by the calibrated new classes.
pub fn s2c_objective(
    context: &ClassGraph,
    batch: &TaskBatch,
    edge: &EdgeEncoderParams,
    attention: &AttentionParams,
    config: &ObjectiveConfig,
) -> Result<ObjectiveOutcome> {
    if batch.query_labels.is_empty() || batch.query_labels.len() != batch.queries.nrows() {
        return Err(Error::ShapeMismatch {
            expected: batch.queries.nrows().max(1),
            got: batch.query_labels.len(),
        });
    }

    let mut refinements = Vec::with_capacity(batch.supports.len());
    let mut features = Vec::new();
    for (z, labels) in &batch.supports {
        let graph = build_sample_graph(edge, z.view(), labels, config.edge_mode)?;
        let r = refine_class_features(edge, &graph, config.rounds, config.edge_mode)?;
        features.extend(r.features.iter().cloned());
        refinements.push(r);
    }

    let mut l_sgn = 0.0;
    let mut triplet_grads = Vec::with_capacity(batch.supports.len());
    let mut valid = 0usize;
    for ((z, labels), r) in batch.supports.iter().zip(&refinements) {
        let nodes = match config.triplet_input {
            TripletInput::Raw => z.clone(),
            TripletInput::Refined => r.refined_nodes(),
        };
        match triplet_loss_grad(nodes.view(), labels, &config.triplet) {
            Ok((l, g)) => {
                l_sgn += l;
                valid += 1;
                triplet_grads.push(Some(g));
            }
            Err(Error::NoValidTriplet) => triplet_grads.push(None),
            Err(e) => return Err(e),
        }
    }
    if valid > 0 {
        l_sgn /= valid as f64;
    }

    let calibration = calibrate(context, &features, attention, config.calibration)?;
    let context_len = context.len();
    let d = attention.dim();
    let mut prototypes = Array2::zeros((context_len + features.len(), d));
    if context_len > 0 {
        prototypes
            .slice_mut(s![..context_len, ..])
            .assign(&context.value_matrix());
    }
    prototypes
        .slice_mut(s![context_len.., ..])
        .assign(&calibration.feature_matrix());
    let all_labels: Vec<ClassId> = context
        .nodes()
        .iter()
        .map(|n| n.label)
        .chain(features.iter().map(|f| f.label))
        .collect();
    let targets = batch
        .query_labels
        .iter()
        .map(|y| all_labels.iter().position(|l| l == y).ok_or(Error::UnknownLabel(*y)))
        .collect::<Result<Vec<_>>>()?;

    let ce = math::cosine_cross_entropy(batch.queries.view(), prototypes.view(), &targets, config.scale);
    let l_cgn = ce.loss;
    let total = total_loss(l_sgn, l_cgn, config.alpha);
    if !total.is_finite() {
        return Err(Error::DivergedLoss {
            stage: "objective",
            value: total,
        });
    }

    let d_cal = ce.d_prototypes.slice(s![context_len.., ..]).mapv(|g| g * config.alpha);
    let (grad_attention, d_sgn) = calibration.backward(attention, d_cal.view());
    let mut grad_edge = edge.zeros_like();
    let mut grad_supports = Vec::with_capacity(refinements.len());
    let mut offset = 0;
    for (r, tg) in refinements.iter().zip(triplet_grads) {
        let c = r.features.len();
        let scale_tg = tg.map(|g| g / valid as f64);
        let d_nodes = match config.triplet_input {
            TripletInput::Refined => scale_tg.as_ref().map(|g| g.view()),
            TripletInput::Raw => None,
        };
        let (ge, mut dz) = r.backward_with_nodes(edge, d_sgn.slice(s![offset..offset + c, ..]), d_nodes);
        offset += c;
        grad_edge.a1 += &ge.a1;
        grad_edge.c1 += &ge.c1;
        grad_edge.a2 += &ge.a2;
        grad_edge.c2 += &ge.c2;
        grad_edge.w += &ge.w;
        grad_edge.b += &ge.b;
        if let (TripletInput::Raw, Some(g)) = (config.triplet_input, &scale_tg) {
            dz += g;
        }
        grad_supports.push(dz);
    }

    Ok(ObjectiveOutcome {
        l_sgn,
        l_cgn,
        total,
        grad_edge,
        grad_attention,
        grad_supports,
        grad_queries: ce.d_queries.mapv(|g| g * config.alpha),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.7, 9.0, 0.0), 0.7);
        assert_eq!(total_loss(0.0, 0.3, 1.0), 0.3);
        assert!((total_loss(0.2, 0.3, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn total_loss_is_affine_in_cgn() {
        let (a, b) = (0.4, 1.3);
        for alpha in [0.0, 0.5, 2.0] {
            let slope = (total_loss(a, b + 1.0, alpha) - total_loss(a, b, alpha)) / 1.0;
            assert!((slope - alpha).abs() < 1e-12);
            assert!((total_loss(a, 0.0, alpha) - a).abs() < 1e-15);
        }
    }
}
