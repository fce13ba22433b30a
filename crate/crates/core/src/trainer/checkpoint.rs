//! Binary checkpoint of a [`ModelState`].

use std::io::{Read, Write};

use ndarray::{Array1, Array2};

use super::{ModelState, Stage};
use crate::backbone::{BackboneParams, ClassifierHead};
use crate::cgn::{AttentionParams, ClassGraph, ClassNode};
use crate::protocol::ClassId;
use crate::sgn::EdgeEncoderParams;
use crate::tensor::{Archive, Tensors};
use crate::{Error, Result};

fn labels_to_f64(labels: impl Iterator<Item = ClassId>) -> Vec<f64> {
    labels.map(|c| c.0 as f64).collect()
}

fn f64_to_labels(values: &[f64]) -> Result<Vec<ClassId>> {
    values
        .iter()
        .map(|&v| {
            if v >= 0.0 && v <= u32::MAX as f64 && v.fract() == 0.0 {
                Ok(ClassId(v as u32))
            } else {
                Err(Error::format("checkpoint", format!("invalid label {v}")))
            }
        })
        .collect()
}

fn matrix(a: &Archive, name: &str) -> Result<Array2<f64>> {
    let t = a.get(name)?;
    match t.shape.as_slice() {
        &[r, c] => Ok(Array2::from_shape_vec((r, c), t.data.clone()).expect("shape matches data")),
        _ => Err(Error::format("checkpoint", format!("{name} is not a matrix"))),
    }
}

impl ModelState {
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new(self.backbone.output_dim());
        a.push_all("backbone", &self.backbone);
        a.push_all("head", &self.head);
        let head_labels = labels_to_f64(self.head.labels.iter().copied());
        a.push("head.labels", vec![head_labels.len()], head_labels);
        a.push_scalar("head.scale", self.head.scale);
        a.push_all("edge", &self.edge);
        a.push_all("attention", &self.attention);
        a.push_scalar("attention.head_count", self.attention.head_count as f64);
        let nodes = self.graph.nodes();
        a.push(
            "graph.labels",
            vec![nodes.len()],
            labels_to_f64(nodes.iter().map(|n| n.label)),
        );
        a.push(
            "graph.sessions",
            vec![nodes.len()],
            nodes.iter().map(|n| n.session as f64).collect(),
        );
        let values = self.graph.value_matrix();
        a.push("graph.nodes", values.shape().to_vec(), values.iter().copied().collect());
        a.push_scalar("state.stage", self.stage.code());
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let backbone = BackboneParams::from_archive(a)?;
        let d = backbone.output_dim();

        let weights = matrix(a, "head.weights")?;
        let head = ClassifierHead {
            labels: f64_to_labels(&a.get("head.labels")?.data)?,
            weights,
            scale: a.scalar("head.scale")?,
        };
        if head.labels.len() != head.weights.nrows() {
            return Err(Error::format("checkpoint", "head labels and weights disagree"));
        }

        let a1 = matrix(a, "edge.a1")?;
        let mut edge = EdgeEncoderParams::zeros(a1.nrows(), a1.ncols());
        a.load_into("edge", &mut edge)?;

        let head_count = a.scalar("attention.head_count")? as usize;
        let mut attention = AttentionParams::identity(d, head_count);
        a.load_into("attention", &mut attention)?;

        let labels = f64_to_labels(&a.get("graph.labels")?.data)?;
        let sessions = &a.get("graph.sessions")?.data;
        let values = if labels.is_empty() {
            Array2::zeros((0, d))
        } else {
            matrix(a, "graph.nodes")?
        };
        if sessions.len() != labels.len() || values.nrows() != labels.len() {
            return Err(Error::format("checkpoint", "graph tensors disagree"));
        }
        let nodes = labels
            .into_iter()
            .zip(sessions)
            .zip(values.rows())
            .map(|((label, &session), row)| ClassNode {
                label,
                session: session as usize,
                values: Array1::from(row.to_vec()),
            })
            .collect();
        let graph = ClassGraph::from_nodes(nodes)?;

        let state = ModelState {
            backbone,
            head,
            edge,
            attention,
            graph,
            stage: Stage::from_code(a.scalar("state.stage")?)?,
        };
        if !state.edge.all_finite() || !state.attention.all_finite() {
            return Err(Error::format("checkpoint", "non-finite parameters"));
        }
        Ok(state)
    }

    pub fn write_checkpoint(&self, w: impl Write) -> Result<()> {
        self.to_archive().write(w)
    }

    pub fn read_checkpoint(r: impl Read) -> Result<Self> {
        Self::from_archive(&Archive::read(r)?)
    }
}
