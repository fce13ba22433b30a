//! End-to-end experiments: data sources, methods, baselines and metrics.

mod results;

use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array1;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use results::{emit_results, read_csv_results, read_json_results, summarize, MethodSummary, ResultFormat};

use crate::backbone::{cross_entropy_grad, embed_dataset, stack, BackboneParams, ClassifierHead};
use crate::cgn::{predict, ClassGraph};
use crate::optim::Sgd;
use crate::protocol::{
    build_session_stream, load_csv, load_directory, load_feature_binary, ClassId, LabeledDataset, ProtocolConfig,
    SessionStream,
};
use crate::seed::{self, tag};
use crate::trainer::{
    stage1_pre_construct, stage2_meta_train, stage3_incremental, ModelState, TrainConfig, Transcript,
};
use crate::{CalibrationMode, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    S2c,
    BaselineFinetune,
    BaselineDecoupledCosine,
    AblationSgnOnly,
    AblationCgnOnly,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::S2c,
        Method::BaselineFinetune,
        Method::BaselineDecoupledCosine,
        Method::AblationSgnOnly,
        Method::AblationCgnOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::S2c => "s2c",
            Method::BaselineFinetune => "baseline_finetune",
            Method::BaselineDecoupledCosine => "baseline_decoupled_cosine",
            Method::AblationSgnOnly => "ablation_sgn_only",
            Method::AblationCgnOnly => "ablation_cgn_only",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Isotropic Gaussian classes with means on a sphere.
    Synthetic {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "default_samples")]
        samples_per_class: usize,
    },
    Csv {
        path: PathBuf,
    },
    Binary {
        path: PathBuf,
    },
    Directory {
        path: PathBuf,
    },
}

fn default_classes() -> usize {
    20
}
fn default_dim() -> usize {
    16
}
fn default_radius() -> f64 {
    4.0
}
fn default_noise() -> f64 {
    1.0
}
fn default_samples() -> usize {
    250
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic {
            classes: default_classes(),
            dim: default_dim(),
            radius: default_radius(),
            noise: default_noise(),
            samples_per_class: default_samples(),
        }
    }
}

impl DatasetSource {
    /// Relative paths are resolved against `base`.
    fn resolve(&self, base: &Path) -> DatasetSource {
        let join = |p: &PathBuf| if p.is_relative() { base.join(p) } else { p.clone() };
        match self {
            DatasetSource::Csv { path } => DatasetSource::Csv { path: join(path) },
            DatasetSource::Binary { path } => DatasetSource::Binary { path: join(path) },
            DatasetSource::Directory { path } => DatasetSource::Directory { path: join(path) },
            s => s.clone(),
        }
    }

    pub fn load(&self, seed: u64) -> Result<LabeledDataset<Array1<f64>>> {
        match self {
            &DatasetSource::Synthetic {
                classes,
                dim,
                radius,
                noise,
                samples_per_class,
            } => Ok(synthetic_gaussians(
                classes,
                dim,
                radius,
                noise,
                samples_per_class,
                seed,
            )),
            DatasetSource::Csv { path } => load_csv(BufReader::new(File::open(path)?)),
            DatasetSource::Binary { path } => load_feature_binary(BufReader::new(File::open(path)?)),
            DatasetSource::Directory { path } => load_directory(path),
        }
    }
}

/// Class `c` has mean `radius * u_c` for a random unit vector `u_c`; samples
/// add `noise * N(0, I)`. Samples are grouped by class.
pub fn synthetic_gaussians(
    classes: usize,
    dim: usize,
    radius: f64,
    noise: f64,
    samples_per_class: usize,
    seed: u64,
) -> LabeledDataset<Array1<f64>> {
    let mut rng = seed::rng(seed, tag::SYNTHETIC);
    let mut gauss = |n: usize| -> Array1<f64> { Array1::from_shape_simple_fn(n, || StandardNormal.sample(&mut rng)) };
    let mut samples = Vec::with_capacity(classes * samples_per_class);
    for c in 0..classes {
        let u = gauss(dim);
        let mean = &u * (radius / crate::math::norm(u.view()).max(f64::MIN_POSITIVE));
        for _ in 0..samples_per_class {
            samples.push((&mean + &(gauss(dim) * noise), ClassId(c as u32)));
        }
    }
    LabeledDataset::new(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub dataset: DatasetSource,
    /// Number of seeds, `seed, seed + 1, ...`.
    pub repeat: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            dataset: DatasetSource::default(),
            repeat: 1,
            seed: 0,
            methods: vec![Method::S2c],
            out: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: ProtocolConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a TOML file; dataset paths are taken relative to its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        cfg.experiment.dataset = cfg.experiment.dataset.resolve(dir);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        self.train.validate()?;
        if self.experiment.repeat == 0 {
            return Err(Error::ConfigInvalid("repeat must be >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, first 16 hex digits.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.experiment.repeat as u64)
            .map(|r| self.experiment.seed + r)
            .collect()
    }

    /// Protocol and training configs with every seed replaced by `seed`.
    pub fn seeded(&self, seed: u64) -> (ProtocolConfig, TrainConfig) {
        let protocol = ProtocolConfig {
            seed,
            ..self.protocol.clone()
        };
        let train = TrainConfig {
            seed,
            ..self.train.clone()
        };
        (protocol, train)
    }

    pub fn stream(&self, seed: u64) -> Result<SessionStream<Array1<f64>>> {
        let data = self.experiment.dataset.load(seed)?;
        build_session_stream(&data, &self.seeded(seed).0)
    }
}

/// Per-seed outcome of one method. Wall-clock time is informational and is
/// ignored by equality and serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionReport {
    pub method: Method,
    pub seed: u64,
    /// Top-1 accuracy after each session, as a fraction.
    pub accuracies: Vec<f64>,
    pub pd: f64,
    pub config_fingerprint: String,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl PartialEq for SessionReport {
    fn eq(&self, other: &Self) -> bool {
        self.method == other.method
            && self.seed == other.seed
            && self.accuracies == other.accuracies
            && self.pd == other.pd
            && self.config_fingerprint == other.config_fingerprint
    }
}

/// First-session accuracy minus last-session accuracy.
pub fn performance_dropping(accuracies: &[f64]) -> Result<f64> {
    match accuracies {
        [] => Err(Error::ConfigInvalid("no session accuracies".into())),
        [first, .., last] => Ok(first - last),
        [_] => Ok(0.0),
    }
}

/// Fraction of `test` that `graph` classifies correctly.
pub fn evaluate_session(
    backbone: &BackboneParams,
    graph: &ClassGraph,
    test: &LabeledDataset<Array1<f64>>,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::ConfigInvalid("empty test set".into()));
    }
    if let Some(missing) = test.labels().find(|y| !graph.contains(*y)) {
        return Err(Error::UnknownLabel(missing));
    }
    let z = embed_dataset(backbone, test)?;
    let mut correct = 0usize;
    for (q, y) in z.samples() {
        if predict(graph, q.view())?.label == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

fn evaluate_head(backbone: &BackboneParams, head: &ClassifierHead, test: &LabeledDataset<Array1<f64>>) -> Result<f64> {
    let z = embed_dataset(backbone, test)?;
    let correct = z.samples().iter().filter(|(q, y)| head.predict(q.view()) == *y).count();
    Ok(correct as f64 / test.len() as f64)
}

/// Fine-tune the whole network on each new session alone, growing the head
/// with randomly initialised rows.
pub fn baseline_finetune(
    state: &ModelState,
    stream: &SessionStream<Array1<f64>>,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    let mut backbone = state.backbone.clone();
    let mut head = state.head.clone();
    let mut accuracies = vec![evaluate_head(&backbone, &head, &stream.test_sets[0])?];
    for t in 1..stream.len() {
        let session = &stream.sessions[t];
        let new: Vec<ClassId> = session.labels().collect();
        head.extend(&new, seed::derive2(config.seed, tag::FINETUNE, t as u64));
        let rows: Vec<&Array1<f64>> = session.samples().iter().map(|(x, _)| x).collect();
        let x = stack(&rows, backbone.input_dim())?;
        let targets: Vec<usize> = session
            .samples()
            .iter()
            .map(|(_, y)| head.labels.iter().position(|l| l == y).expect("label in head"))
            .collect();
        let mut opt_backbone = Sgd::new(config.momentum);
        let mut opt_head = Sgd::new(config.momentum);
        for _ in 0..config.finetune_steps {
            let (loss, g_backbone, g_head) = cross_entropy_grad(&backbone, &head, x.view(), &targets);
            if !loss.is_finite() {
                return Err(Error::DivergedLoss {
                    stage: "finetune",
                    value: loss,
                });
            }
            opt_backbone.step(&mut backbone, &g_backbone, config.finetune_lr);
            let mut head_grad = head.clone();
            head_grad.weights = g_head;
            opt_head.step(&mut head, &head_grad, config.finetune_lr);
        }
        accuracies.push(evaluate_head(&backbone, &head, &stream.test_sets[t])?);
    }
    Ok(accuracies)
}

/// Frozen backbone, raw class-mean prototypes, cosine nearest prototype.
pub fn baseline_decoupled_cosine(
    state: &ModelState,
    stream: &SessionStream<Array1<f64>>,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    let plain = TrainConfig {
        edge_clamp: Some(0.0),
        calibration: CalibrationMode::Disabled,
        incremental_steps: 0,
        sgn_rounds: 1,
        ..config.clone()
    };
    let (_, snapshots) = stage3_incremental(state, stream, &plain)?;
    evaluate_snapshots(&state.backbone, &snapshots, stream)
}

fn evaluate_snapshots(
    backbone: &BackboneParams,
    snapshots: &[ClassGraph],
    stream: &SessionStream<Array1<f64>>,
) -> Result<Vec<f64>> {
    snapshots
        .iter()
        .zip(&stream.test_sets)
        .map(|(g, test)| evaluate_session(backbone, g, test))
        .collect()
}

/// Everything produced by one method on one seed.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub accuracies: Vec<f64>,
    pub transcript: Option<Transcript>,
    pub state: ModelState,
}

/// Training config used for `method`.
pub fn method_config(method: Method, base: &TrainConfig) -> TrainConfig {
    match method {
        Method::AblationSgnOnly => TrainConfig {
            calibration: CalibrationMode::Disabled,
            ..base.clone()
        },
        Method::AblationCgnOnly => TrainConfig {
            edge_clamp: Some(0.0),
            ..base.clone()
        },
        _ => base.clone(),
    }
}

/// Run `method` after stage 1 has produced `pre`.
pub fn run_method_from(
    method: Method,
    pre: &ModelState,
    stream: &SessionStream<Array1<f64>>,
    config: &TrainConfig,
) -> Result<MethodRun> {
    match method {
        Method::BaselineFinetune => Ok(MethodRun {
            accuracies: baseline_finetune(pre, stream, config)?,
            transcript: None,
            state: pre.clone(),
        }),
        Method::BaselineDecoupledCosine => Ok(MethodRun {
            accuracies: baseline_decoupled_cosine(pre, stream, config)?,
            transcript: None,
            state: pre.clone(),
        }),
        _ => {
            let cfg = method_config(method, config);
            let (meta, transcript) = stage2_meta_train(pre, stream, &cfg)?;
            let (state, snapshots) = stage3_incremental(&meta, stream, &cfg)?;
            Ok(MethodRun {
                accuracies: evaluate_snapshots(&state.backbone, &snapshots, stream)?,
                transcript: Some(transcript),
                state,
            })
        }
    }
}

/// Run every configured method on every seed. Reports are ordered by seed,
/// then by method in config order. Seeds run in parallel.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<SessionReport>> {
    config.validate()?;
    let fingerprint = config.fingerprint();
    let per_seed: Vec<Result<Vec<SessionReport>>> = config
        .seeds()
        .into_par_iter()
        .map(|seed| {
            let stream = config.stream(seed)?;
            let (_, train) = config.seeded(seed);
            let (pre, _) = stage1_pre_construct(&stream, &train)?;
            config
                .experiment
                .methods
                .iter()
                .map(|&method| {
                    let start = Instant::now();
                    let run = run_method_from(method, &pre, &stream, &train)?;
                    Ok(SessionReport {
                        method,
                        seed,
                        pd: performance_dropping(&run.accuracies)?,
                        accuracies: run.accuracies,
                        config_fingerprint: fingerprint.clone(),
                        wall_clock_secs: start.elapsed().as_secs_f64(),
                    })
                })
                .collect()
        })
        .collect();
    let mut reports = Vec::new();
    for r in per_seed {
        reports.extend(r?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn performance_dropping_reference_rows() {
        let run_a = [75.15, 73.07, 68.31, 64.61, 61.94, 59.41, 57.62, 55.62, 53.19];
        let run_b = [73.25, 71.57, 67.46, 64.01, 61.04, 58.41, 55.62, 53.62, 52.00];
        assert!((performance_dropping(&run_a).unwrap() - 21.96).abs() < 0.005);
        assert!((performance_dropping(&run_b).unwrap() - 21.25).abs() < 0.005);
        assert_eq!(performance_dropping(&[50.0]).unwrap(), 0.0);
        assert!(performance_dropping(&[]).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
        let partial = ExperimentConfig::from_toml(
            "[protocol]\nbase_class_count = 5\nn_way = 2\nk_shot = 1\nsession_count = 1\nseed = 0\n\n[experiment]\nrepeat = 3\nmethods = [\"s2c\", \"baseline_finetune\"]\n\n[experiment.dataset]\nkind = \"synthetic\"\nclasses = 7\n",
        )
        .unwrap();
        assert_eq!(partial.experiment.repeat, 3);
        assert_eq!(partial.seeds(), vec![0, 1, 2]);
        assert!(ExperimentConfig::from_toml("[train]\nunknown = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("[experiment]\nrepeat = 0\n").is_err());
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = synthetic_gaussians(3, 4, 4.0, 1.0, 5, 9);
        let b = synthetic_gaussians(3, 4, 4.0, 1.0, 5, 9);
        let c = synthetic_gaussians(3, 4, 4.0, 1.0, 5, 10);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.class_count(), 3);
        assert_eq!(a.len(), 15);
    }

    #[test]
    fn report_equality_ignores_wall_clock() {
        let r = SessionReport {
            method: Method::S2c,
            seed: 1,
            accuracies: vec![0.9, 0.8],
            pd: 0.9 - 0.8,
            config_fingerprint: "abc".into(),
            wall_clock_secs: 1.0,
        };
        let s = SessionReport {
            wall_clock_secs: 2.0,
            ..r.clone()
        };
        assert_eq!(r, s);
        assert!(!serde_json::to_string(&r).unwrap().contains("wall"));
    }
}
