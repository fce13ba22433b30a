//! The three training stages.
//!
//! Stage 1 pretrains the backbone on the base session and seeds the class
//! graph with base prototypes. Stage 2 freezes the backbone and meta-trains
//! the edge encoder and the attention weights on pseudo-incremental tasks.
//! Stage 3 walks the incremental sessions, refining, calibrating and
//! inserting each new set of classes.

mod checkpoint;
mod objective;
mod pseudo;

use std::io::Write;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use self::objective::{s2c_objective, total_loss, ObjectiveConfig, ObjectiveOutcome, TaskBatch};
pub use pseudo::{manifold_mixup, sample_pseudo_task, MixCoefficient, PseudoTask, PseudoTaskSpec, VirtualClass};

use crate::backbone::{
    dataset_prototypes, embed_dataset, pretrain_base, stack, BackboneParams, ClassifierHead, Embedding, PretrainConfig,
};
use crate::cgn::{self, build_base_graph, calibrate, insert_calibrated, AttentionParams, CalibrationMode, ClassGraph};
use crate::optim::{clip_global_norm, CosineSchedule, Sgd};
use crate::protocol::{LabeledDataset, SessionStream};
use crate::seed::{self, tag};
use crate::sgn::{
    build_sample_graph, refine_class_features, EdgeEncoderParams, EdgeMode, Mining, TripletConfig, TripletInput,
};
use crate::tensor::Tensors;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    PreConstructed,
    MetaTrained,
    Incremental,
}

impl Stage {
    /// Stages only move forward; skipping ahead is allowed.
    pub fn advance(self, to: Stage) -> Result<Stage> {
        if to > self {
            Ok(to)
        } else {
            Err(Error::StageOrder { from: self, to })
        }
    }

    pub(crate) fn code(self) -> f64 {
        match self {
            Stage::PreConstructed => 0.0,
            Stage::MetaTrained => 1.0,
            Stage::Incremental => 2.0,
        }
    }

    pub(crate) fn from_code(v: f64) -> Result<Stage> {
        match v as i64 {
            0 if v == 0.0 => Ok(Stage::PreConstructed),
            1 if v == 1.0 => Ok(Stage::MetaTrained),
            2 if v == 2.0 => Ok(Stage::Incremental),
            _ => Err(Error::format("checkpoint", format!("unknown stage code {v}"))),
        }
    }
}

/// Every hyperparameter of the pipeline. Missing keys take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub pretrain_lr: f64,
    pub momentum: f64,
    /// Cosine logit scale, shared by the head, the CGN loss and stage 3.
    pub scale: f64,

    pub sgn_rounds: usize,
    pub edge_hidden: usize,
    pub edge_init_bias: f64,
    /// Replace the learned edge encoder by a constant weight.
    pub edge_clamp: Option<f64>,
    pub margin: f64,
    pub mining: Mining,
    pub triplet_input: TripletInput,

    pub head_count: usize,
    pub calibration: CalibrationMode,
    pub attention_identity_init: bool,
    pub attention_init_noise: f64,

    pub alpha: f64,
    pub beta_a: f64,
    pub beta_b: f64,
    pub fixed_lambda: Option<f64>,
    pub pseudo_tasks: usize,
    /// `None` uses the stream's `n_way` / `k_shot`.
    pub pseudo_way: Option<usize>,
    pub pseudo_shot: Option<usize>,
    pub pseudo_query: usize,
    pub virtual_per_pair: usize,
    /// Queries per left-out base class in every pseudo task.
    pub context_query: usize,
    pub meta_iterations: usize,
    /// Pseudo tasks per iteration; losses and gradients are averaged.
    pub meta_batch: usize,
    /// Revisit a fixed pool of this many pseudo tasks instead of drawing a
    /// fresh one every time.
    pub task_pool: Option<usize>,
    pub meta_lr: f64,
    pub grad_clip: f64,

    pub incremental_steps: usize,
    pub incremental_lr: f64,

    pub finetune_steps: usize,
    pub finetune_lr: f64,

    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_dim: 64,
            output_dim: 16,
            pretrain_epochs: 50,
            batch_size: 32,
            pretrain_lr: 0.05,
            momentum: 0.9,
            scale: 16.0,
            sgn_rounds: 2,
            edge_hidden: 16,
            edge_init_bias: -6.0,
            edge_clamp: None,
            margin: 0.5,
            mining: Mining::BatchHard,
            triplet_input: TripletInput::Raw,
            head_count: 1,
            calibration: CalibrationMode::Literal,
            attention_identity_init: false,
            attention_init_noise: 0.01,
            alpha: 1.0,
            beta_a: 2.0,
            beta_b: 2.0,
            fixed_lambda: None,
            pseudo_tasks: 2,
            pseudo_way: None,
            pseudo_shot: None,
            pseudo_query: 10,
            virtual_per_pair: 1,
            context_query: 10,
            meta_iterations: 500,
            meta_batch: 4,
            task_pool: Some(200),
            meta_lr: 0.0005,
            grad_clip: 5.0,
            incremental_steps: 0,
            incremental_lr: 0.001,
            finetune_steps: 100,
            finetune_lr: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if self.hidden_dim == 0 || self.output_dim == 0 || self.edge_hidden == 0 {
            return bad("dimensions must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.sgn_rounds == 0 {
            return bad("sgn_rounds must be >= 1");
        }
        if self.head_count == 0 || !self.output_dim.is_multiple_of(self.head_count) {
            return bad("head_count must divide output_dim");
        }
        if self.scale.is_nan() || self.scale <= 0.0 {
            return bad("scale must be positive");
        }
        if !(self.beta_a > 0.0 && self.beta_b > 0.0) {
            return bad("beta parameters must be positive");
        }
        if let Some(l) = self.fixed_lambda {
            if !(0.0..=1.0).contains(&l) {
                return bad("fixed_lambda must lie in [0, 1]");
            }
        }
        if self.meta_batch == 0 || self.task_pool == Some(0) {
            return bad("meta_batch and task_pool must be >= 1");
        }
        if self.pseudo_tasks == 0 || self.pseudo_query == 0 {
            return bad("pseudo_tasks and pseudo_query must be >= 1");
        }
        if matches!(self.pseudo_way, Some(w) if w < 2) || matches!(self.pseudo_shot, Some(0)) {
            return bad("pseudo_way must be >= 2 and pseudo_shot >= 1");
        }
        if self.alpha < 0.0 || self.margin < 0.0 {
            return bad("alpha and margin must be non-negative");
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            hidden_dim: self.hidden_dim,
            output_dim: self.output_dim,
            epochs: self.pretrain_epochs,
            batch_size: self.batch_size,
            lr: self.pretrain_lr,
            momentum: self.momentum,
            scale: self.scale,
            seed: self.seed,
        }
    }

    pub fn edge_mode(&self) -> EdgeMode {
        self.edge_clamp.map_or(EdgeMode::Learned, EdgeMode::Clamped)
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            rounds: self.sgn_rounds,
            edge_mode: self.edge_mode(),
            calibration: self.calibration,
            triplet: TripletConfig {
                margin: self.margin,
                mining: self.mining,
            },
            triplet_input: self.triplet_input,
            scale: self.scale,
            alpha: self.alpha,
        }
    }

    pub fn pseudo_spec<T>(&self, stream: &SessionStream<T>) -> PseudoTaskSpec {
        PseudoTaskSpec {
            tasks: self.pseudo_tasks,
            way: self.pseudo_way.unwrap_or(stream.config.n_way),
            shot: self.pseudo_shot.unwrap_or(stream.config.k_shot),
            query: self.pseudo_query,
            virtual_per_pair: self.virtual_per_pair,
            context_query: self.context_query,
            beta: (self.beta_a, self.beta_b),
            fixed_lambda: self.fixed_lambda,
        }
    }
}

/// Everything needed to classify: the frozen backbone, the pretraining head,
/// the two meta-learned modules and the current class graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub backbone: BackboneParams,
    pub head: ClassifierHead,
    pub edge: EdgeEncoderParams,
    pub attention: AttentionParams,
    pub graph: ClassGraph,
    pub stage: Stage,
}

impl ModelState {
    pub fn embed(&self, data: &LabeledDataset<Array1<f64>>) -> Result<LabeledDataset<Embedding>> {
        embed_dataset(&self.backbone, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub loss_curve: Vec<f64>,
    pub train_accuracy: f64,
}

pub fn stage1_pre_construct(
    stream: &SessionStream<Array1<f64>>,
    config: &TrainConfig,
) -> Result<(ModelState, PretrainReport)> {
    config.validate()?;
    let pretrained = pretrain_base(stream, &config.pretrain_config())?;
    let base = embed_dataset(&pretrained.backbone, stream.base())?;
    let graph = build_base_graph(&dataset_prototypes(&base)?)?;
    let d = config.output_dim;
    let state = ModelState {
        backbone: pretrained.backbone,
        head: pretrained.head,
        edge: EdgeEncoderParams::init(d, config.edge_hidden, config.edge_init_bias, config.seed),
        attention: AttentionParams::init(
            d,
            config.head_count,
            config.attention_identity_init,
            config.attention_init_noise,
            config.seed,
        ),
        graph,
        stage: Stage::PreConstructed,
    };
    Ok((
        state,
        PretrainReport {
            loss_curve: pretrained.loss_curve,
            train_accuracy: pretrained.train_accuracy,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranscriptLine {
    pub iteration: usize,
    pub l_sgn: f64,
    pub l_cgn: f64,
    pub total: f64,
}

/// Per-iteration losses of meta-training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    pub lines: Vec<TranscriptLine>,
}

impl Transcript {
    /// Mean total loss over the first and the last tenth of iterations.
    pub fn decile_means(&self) -> Option<(f64, f64)> {
        let n = self.lines.len();
        if n == 0 {
            return None;
        }
        let k = (n / 10).max(1);
        let mean = |s: &[TranscriptLine]| s.iter().map(|l| l.total).sum::<f64>() / s.len() as f64;
        Some((mean(&self.lines[..k]), mean(&self.lines[n - k..])))
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "iteration\tl_sgn\tl_cgn\ttotal")?;
        for l in &self.lines {
            writeln!(w, "{}\t{}\t{}\t{}", l.iteration, l.l_sgn, l.l_cgn, l.total)?;
        }
        Ok(())
    }
}

/// Context for a pseudo task: the base graph without its real classes,
/// which play the role of the new session.
fn pseudo_context(graph: &ClassGraph, task: &PseudoTask) -> ClassGraph {
    graph.without(&task.real_labels())
}

pub fn stage2_meta_train(
    state: &ModelState,
    stream: &SessionStream<Array1<f64>>,
    config: &TrainConfig,
) -> Result<(ModelState, Transcript)> {
    config.validate()?;
    let stage = state.stage.advance(Stage::MetaTrained)?;
    let base = state.embed(stream.base())?;
    let spec = config.pseudo_spec(stream);
    let objective = config.objective();
    let schedule = CosineSchedule {
        base_lr: config.meta_lr,
        total_steps: config.meta_iterations,
    };
    let mut edge = state.edge.clone();
    let mut attention = state.attention.clone();
    let mut opt_edge = Sgd::new(config.momentum);
    let mut opt_attention = Sgd::new(config.momentum);
    let mut transcript = Transcript::default();

    for it in 0..config.meta_iterations {
        let outcomes = (0..config.meta_batch)
            .into_par_iter()
            .map(|b| {
                let mut k = (it * config.meta_batch + b) as u64;
                if let Some(pool) = config.task_pool {
                    k %= pool as u64;
                }
                let seed = seed::derive2(config.seed, tag::META_ITERATION, k);
                let task = sample_pseudo_task(&base, &spec, seed)?;
                let context = pseudo_context(&state.graph, &task);
                s2c_objective(&context, &task.to_batch()?, &edge, &attention, &objective)
            })
            .collect::<Result<Vec<_>>>()?;
        let out = average(outcomes);
        transcript.lines.push(TranscriptLine {
            iteration: it,
            l_sgn: out.l_sgn,
            l_cgn: out.l_cgn,
            total: out.total,
        });
        let (mut g_edge, mut g_attention) = (out.grad_edge, out.grad_attention);
        clip_global_norm(&mut g_edge, config.grad_clip);
        clip_global_norm(&mut g_attention, config.grad_clip);
        let lr = schedule.lr(it);
        if objective.edge_mode == EdgeMode::Learned {
            opt_edge.step(&mut edge, &g_edge, lr);
        }
        if objective.calibration != CalibrationMode::Disabled {
            opt_attention.step(&mut attention, &g_attention, lr);
        }
        if !edge.all_finite() || !attention.all_finite() {
            return Err(Error::DivergedLoss {
                stage: "meta-train",
                value: f64::NAN,
            });
        }
    }
    Ok((
        ModelState {
            edge,
            attention,
            stage,
            ..state.clone()
        },
        transcript,
    ))
}

/// Mean of losses and parameter gradients, summed in task order.
fn average(outcomes: Vec<ObjectiveOutcome>) -> ObjectiveOutcome {
    let n = outcomes.len() as f64;
    let mut iter = outcomes.into_iter();
    let mut acc = iter.next().expect("meta_batch >= 1");
    for o in iter {
        acc.l_sgn += o.l_sgn;
        acc.l_cgn += o.l_cgn;
        acc.total += o.total;
        let mut flat = acc.grad_edge.flatten();
        flat.iter_mut().zip(o.grad_edge.flatten()).for_each(|(a, b)| *a += b);
        acc.grad_edge.assign_flat(&flat);
        let mut flat = acc.grad_attention.flatten();
        flat.iter_mut()
            .zip(o.grad_attention.flatten())
            .for_each(|(a, b)| *a += b);
        acc.grad_attention.assign_flat(&flat);
    }
    acc.l_sgn /= n;
    acc.l_cgn /= n;
    acc.total /= n;
    acc.grad_edge.visit_mut(&mut |_, d| d.iter_mut().for_each(|v| *v /= n));
    acc.grad_attention
        .visit_mut(&mut |_, d| d.iter_mut().for_each(|v| *v /= n));
    acc
}

/// Query accuracy of one freshly sampled pseudo task.
pub fn pseudo_task_accuracy(
    state: &ModelState,
    base: &LabeledDataset<Embedding>,
    spec: &PseudoTaskSpec,
    config: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    let task = sample_pseudo_task(base, spec, seed)?;
    let context = pseudo_context(&state.graph, &task);
    let batch = task.to_batch()?;
    let mut graph = context.clone();
    for (z, labels) in &batch.supports {
        let g = build_sample_graph(&state.edge, z.view(), labels, config.edge_mode())?;
        let r = refine_class_features(&state.edge, &g, config.sgn_rounds, config.edge_mode())?;
        let cal = calibrate(&context, &r.features, &state.attention, config.calibration)?;
        graph = insert_calibrated(&graph, &cal.features, 1)?;
    }
    let mut correct = 0;
    for (q, y) in batch.queries.rows().into_iter().zip(&batch.query_labels) {
        if cgn::predict(&graph, q)?.label == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch.query_labels.len() as f64)
}

/// Process every incremental session in order.
///
/// Returns the final state and one graph snapshot per session, the first
/// being the base graph.
pub fn stage3_incremental(
    state: &ModelState,
    stream: &SessionStream<Array1<f64>>,
    config: &TrainConfig,
) -> Result<(ModelState, Vec<ClassGraph>)> {
    config.validate()?;
    let stage = state.stage.advance(Stage::Incremental)?;
    let mode = config.edge_mode();
    let mut edge = state.edge.clone();
    let mut attention = state.attention.clone();
    let mut graph = state.graph.clone();
    let mut snapshots = vec![graph.clone()];
    for t in 1..stream.len() {
        let session = state.embed(&stream.sessions[t])?;
        let rows: Vec<&Array1<f64>> = session.samples().iter().map(|(z, _)| z).collect();
        let z = stack(&rows, config.output_dim)?;
        let labels: Vec<_> = session.samples().iter().map(|(_, y)| *y).collect();

        if config.incremental_steps > 0 {
            let batch = TaskBatch {
                supports: vec![(z.clone(), labels.clone())],
                queries: z.clone(),
                query_labels: labels.clone(),
            };
            let objective = config.objective();
            let mut opt_edge = Sgd::new(config.momentum);
            let mut opt_attention = Sgd::new(config.momentum);
            for _ in 0..config.incremental_steps {
                let out = s2c_objective(&graph, &batch, &edge, &attention, &objective)?;
                let (mut ge, mut ga) = (out.grad_edge, out.grad_attention);
                clip_global_norm(&mut ge, config.grad_clip);
                clip_global_norm(&mut ga, config.grad_clip);
                if mode == EdgeMode::Learned {
                    opt_edge.step(&mut edge, &ge, config.incremental_lr);
                }
                if config.calibration != CalibrationMode::Disabled {
                    opt_attention.step(&mut attention, &ga, config.incremental_lr);
                }
            }
        }

        let sample_graph = build_sample_graph(&edge, z.view(), &labels, mode)?;
        let refined = refine_class_features(&edge, &sample_graph, config.sgn_rounds, mode)?;
        let calibrated = calibrate(&graph, &refined.features, &attention, config.calibration)?;
        graph = insert_calibrated(&graph, &calibrated.features, t)?;
        snapshots.push(graph.clone());
    }
    Ok((
        ModelState {
            edge,
            attention,
            graph,
            stage,
            ..state.clone()
        },
        snapshots,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_moves_forward_only() {
        assert_eq!(
            Stage::PreConstructed.advance(Stage::MetaTrained).unwrap(),
            Stage::MetaTrained
        );
        assert_eq!(
            Stage::PreConstructed.advance(Stage::Incremental).unwrap(),
            Stage::Incremental
        );
        assert!(matches!(
            Stage::Incremental.advance(Stage::MetaTrained),
            Err(Error::StageOrder { .. })
        ));
        assert!(Stage::MetaTrained.advance(Stage::MetaTrained).is_err());
        for s in [Stage::PreConstructed, Stage::MetaTrained, Stage::Incremental] {
            assert_eq!(Stage::from_code(s.code()).unwrap(), s);
        }
        assert!(Stage::from_code(0.5).is_err());
    }

    #[test]
    fn config_defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            head_count: 3,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let from_toml: TrainConfig = toml::from_str("meta_iterations = 5").unwrap();
        assert_eq!(from_toml.meta_iterations, 5);
        assert!(toml::from_str::<TrainConfig>("bogus = 1").is_err());
    }

    #[test]
    fn transcript_deciles() {
        let t = Transcript {
            lines: (0..20)
                .map(|i| TranscriptLine {
                    iteration: i,
                    l_sgn: 0.0,
                    l_cgn: 0.0,
                    total: 20.0 - i as f64,
                })
                .collect(),
        };
        assert_eq!(t.decile_means().unwrap(), (19.5, 1.5));
        assert!(Transcript::default().decile_means().is_none());
    }
}
