//! Session streams and episode sampling.
//!
//! A [`SessionStream`] splits a labelled dataset into a base session with
//! abundant data followed by `session_count` N-way K-shot sessions whose label
//! spaces are pairwise disjoint. Session `t` is evaluated on held-out samples
//! of every class seen up to and including `t`.

mod loader;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::seed::{self, tag};
use crate::{Error, Result};

pub use loader::{load_csv, load_directory, load_feature_binary, write_csv, write_feature_binary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

pub type LabelSet = BTreeSet<ClassId>;

/// Samples with integer class labels and a per-class index.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<T> {
    samples: Vec<(T, ClassId)>,
    by_class: BTreeMap<ClassId, Vec<usize>>,
}

impl<T> LabeledDataset<T> {
    pub fn new(samples: Vec<(T, ClassId)>) -> Self {
        let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, (_, y)) in samples.iter().enumerate() {
            by_class.entry(*y).or_default().push(i);
        }
        LabeledDataset { samples, by_class }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[(T, ClassId)] {
        &self.samples
    }

    pub fn sample(&self, index: usize) -> &(T, ClassId) {
        &self.samples[index]
    }

    /// Labels in ascending order.
    pub fn labels(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.by_class.keys().copied()
    }

    pub fn label_set(&self) -> LabelSet {
        self.labels().collect()
    }

    pub fn class_count(&self) -> usize {
        self.by_class.len()
    }

    /// Dataset indices of the samples labelled `label`, in insertion order.
    pub fn class_indices(&self, label: ClassId) -> &[usize] {
        self.by_class.get(&label).map_or(&[], Vec::as_slice)
    }

    pub fn class_size(&self, label: ClassId) -> usize {
        self.class_indices(label).len()
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> LabeledDataset<U> {
        LabeledDataset {
            samples: self.samples.iter().map(|(x, y)| (f(x), *y)).collect(),
            by_class: self.by_class.clone(),
        }
    }

    pub fn into_samples(self) -> Vec<(T, ClassId)> {
        self.samples
    }
}

impl<T: Clone> LabeledDataset<T> {
    pub fn subset(&self, indices: &[usize]) -> Self {
        LabeledDataset::new(indices.iter().map(|&i| self.samples[i].clone()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub base_class_count: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub query_per_class: usize,
    pub session_count: usize,
    pub seed: u64,
    /// Fraction of every class held out for the cumulative test sets.
    pub test_fraction: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            base_class_count: 12,
            n_way: 2,
            k_shot: 5,
            query_per_class: 15,
            session_count: 4,
            seed: 0,
            test_fraction: 0.2,
        }
    }
}

impl ProtocolConfig {
    pub fn required_classes(&self) -> usize {
        self.base_class_count + self.session_count * self.n_way
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::ConfigInvalid(format!("n_way must be >= 2, got {}", self.n_way)));
        }
        if self.k_shot < 1 {
            return Err(Error::ConfigInvalid("k_shot must be >= 1".into()));
        }
        if self.base_class_count < 1 {
            return Err(Error::ConfigInvalid("base_class_count must be >= 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

/// Base session plus incremental sessions, with cumulative test sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionStream<T> {
    pub sessions: Vec<LabeledDataset<T>>,
    pub label_spaces: Vec<LabelSet>,
    pub test_sets: Vec<LabeledDataset<T>>,
    pub config: ProtocolConfig,
}

impl<T> SessionStream<T> {
    /// Number of sessions including the base session.
    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn base(&self) -> &LabeledDataset<T> {
        &self.sessions[0]
    }

    pub fn describe(&self) -> Vec<SessionRecord> {
        self.sessions
            .iter()
            .zip(&self.label_spaces)
            .zip(&self.test_sets)
            .enumerate()
            .map(|(t, ((train, labels), test))| SessionRecord {
                session: t,
                labels: labels.iter().copied().collect(),
                train_samples: train.len(),
                test_samples: test.len(),
                test_labels: test.class_count(),
            })
            .collect()
    }

    /// One JSON object per session, newline terminated.
    pub fn write_description(&self, mut w: impl Write) -> Result<()> {
        for rec in self.describe() {
            let line = serde_json::to_string(&rec).map_err(|e| Error::format("stream description", e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session: usize,
    pub labels: Vec<ClassId>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub test_labels: usize,
}

pub fn build_session_stream<T: Clone>(
    dataset: &LabeledDataset<T>,
    config: &ProtocolConfig,
) -> Result<SessionStream<T>> {
    config.validate()?;
    let needed = config.required_classes();
    if needed > dataset.class_count() {
        return Err(Error::InsufficientClasses {
            needed,
            available: dataset.class_count(),
        });
    }

    let mut classes: Vec<ClassId> = dataset.labels().collect();
    classes.shuffle(&mut seed::rng(config.seed, tag::CLASS_SPLIT));

    let mut label_spaces = vec![classes[..config.base_class_count].iter().copied().collect()];
    for t in 0..config.session_count {
        let start = config.base_class_count + t * config.n_way;
        label_spaces.push(
            classes[start..start + config.n_way]
                .iter()
                .copied()
                .collect::<LabelSet>(),
        );
    }

    // Per-class split: shuffled indices, held-out prefix for test, rest train.
    let mut train_idx: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    let mut test_idx: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (t, space) in label_spaces.iter().enumerate() {
        for &class in space {
            let mut idx = dataset.class_indices(class).to_vec();
            idx.shuffle(&mut seed::rng_indexed(config.seed, tag::CLASS_SAMPLES, class.0 as u64));
            let n = idx.len();
            let n_test = ((n as f64 * config.test_fraction).round() as usize).max(1);
            let min_train = if t == 0 { 1 } else { config.k_shot };
            if n < n_test + min_train {
                return Err(Error::InsufficientSamples {
                    class,
                    needed: n_test + min_train,
                    available: n,
                });
            }
            let mut train = idx.split_off(n_test);
            if t > 0 {
                train.truncate(config.k_shot);
            }
            train_idx.insert(class, train);
            test_idx.insert(class, idx);
        }
    }

    let gather = |labels: &mut dyn Iterator<Item = &ClassId>, from: &BTreeMap<ClassId, Vec<usize>>| {
        let idx: Vec<usize> = labels.flat_map(|c| from[c].iter().copied()).collect();
        dataset.subset(&idx)
    };

    let sessions = label_spaces
        .iter()
        .map(|space| gather(&mut space.iter(), &train_idx))
        .collect();
    let test_sets = (0..label_spaces.len())
        .map(|t| gather(&mut label_spaces[..=t].iter().flatten(), &test_idx))
        .collect();

    Ok(SessionStream {
        sessions,
        label_spaces,
        test_sets,
        config: config.clone(),
    })
}

/// `Y^0 ∪ … ∪ Y^t`.
pub fn cumulative_label_set<T>(stream: &SessionStream<T>, t: usize) -> Result<LabelSet> {
    if t >= stream.label_spaces.len() {
        return Err(Error::IndexOutOfRange {
            index: t,
            len: stream.label_spaces.len(),
        });
    }
    Ok(stream.label_spaces[..=t].iter().flatten().copied().collect())
}

/// One N-way K-shot task. Support is grouped by class, classes ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode<T> {
    pub support: Vec<(T, ClassId)>,
    pub query: Vec<(T, ClassId)>,
    pub way: usize,
    pub shot: usize,
    /// Dataset indices backing `support` and `query`.
    pub support_index: Vec<usize>,
    pub query_index: Vec<usize>,
}

impl<T> Episode<T> {
    pub fn classes(&self) -> Vec<ClassId> {
        let mut out: Vec<ClassId> = self.support.iter().map(|(_, y)| *y).collect();
        out.dedup();
        out
    }
}

pub fn sample_episode<T: Clone>(
    dataset: &LabeledDataset<T>,
    way: usize,
    shot: usize,
    query_per_class: usize,
    seed: u64,
) -> Result<Episode<T>> {
    let classes: Vec<ClassId> = dataset.labels().collect();
    sample_episode_from(dataset, &classes, way, shot, query_per_class, seed)
}

/// Like [`sample_episode`] but restricted to `candidates`.
pub(crate) fn sample_episode_from<T: Clone>(
    dataset: &LabeledDataset<T>,
    candidates: &[ClassId],
    way: usize,
    shot: usize,
    query_per_class: usize,
    seed: u64,
) -> Result<Episode<T>> {
    let per_class = shot + query_per_class;
    if candidates.len() < way {
        return Err(Error::InsufficientClasses {
            needed: way,
            available: candidates.len(),
        });
    }
    let eligible: Vec<ClassId> = candidates
        .iter()
        .copied()
        .filter(|&c| dataset.class_size(c) >= per_class)
        .collect();
    if eligible.len() < way {
        let class = candidates
            .iter()
            .copied()
            .find(|&c| dataset.class_size(c) < per_class)
            .expect("some candidate is ineligible");
        return Err(Error::InsufficientSamples {
            class,
            needed: per_class,
            available: dataset.class_size(class),
        });
    }
    let mut rng = seed::rng(seed, tag::EPISODE);
    let mut chosen = eligible;
    chosen.shuffle(&mut rng);
    chosen.truncate(way);
    chosen.sort();

    let mut ep = Episode {
        support: Vec::with_capacity(way * shot),
        query: Vec::with_capacity(way * query_per_class),
        way,
        shot,
        support_index: Vec::new(),
        query_index: Vec::new(),
    };
    for class in chosen {
        let mut picked = dataset.class_indices(class).to_vec();
        picked.shuffle(&mut rng);
        for (k, &i) in picked[..per_class].iter().enumerate() {
            let (x, y) = dataset.sample(i).clone();
            if k < shot {
                ep.support.push((x, y));
                ep.support_index.push(i);
            } else {
                ep.query.push((x, y));
                ep.query_index.push(i);
            }
        }
    }
    Ok(ep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(classes: u32, per_class: usize) -> LabeledDataset<u32> {
        let mut s = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                s.push((c * 1000 + i as u32, ClassId(c)));
            }
        }
        LabeledDataset::new(s)
    }

    fn cfg(base: usize, way: usize, sessions: usize) -> ProtocolConfig {
        ProtocolConfig {
            base_class_count: base,
            n_way: way,
            k_shot: 5,
            query_per_class: 15,
            session_count: sessions,
            seed: 3,
            test_fraction: 0.2,
        }
    }

    #[test]
    fn sixty_base_eight_sessions() {
        let s = build_session_stream(&toy(100, 30), &cfg(60, 5, 8)).unwrap();
        assert_eq!(s.len(), 9);
        assert_eq!(s.label_spaces[0].len(), 60);
        for t in 1..=8 {
            assert_eq!(s.label_spaces[t].len(), 5);
            for c in s.sessions[t].labels() {
                assert_eq!(s.sessions[t].class_size(c), 5);
            }
        }
        assert_eq!(cumulative_label_set(&s, 8).unwrap().len(), 100);
    }

    #[test]
    fn hundred_base_ten_sessions() {
        let s = build_session_stream(&toy(200, 10), &cfg(100, 10, 10)).unwrap();
        assert_eq!(s.len(), 11);
        assert!(s.label_spaces[1..].iter().all(|y| y.len() == 10));
    }

    #[test]
    fn base_only_stream() {
        let s = build_session_stream(&toy(10, 10), &cfg(10, 2, 0)).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.test_sets[0].label_set(), s.label_spaces[0]);
        assert_eq!(s.test_sets[0].class_count(), 10);
    }

    #[test]
    fn class_budget_errors() {
        let err = build_session_stream(&toy(10, 10), &cfg(8, 2, 2)).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientClasses {
                needed: 12,
                available: 10
            }
        ));
        // 5 samples: 1 test + 4 train < k_shot
        let err = build_session_stream(&toy(10, 5), &cfg(6, 2, 2)).unwrap_err();
        assert!(matches!(err, Error::InsufficientSamples { .. }));
    }

    #[test]
    fn held_out_fraction() {
        let s = build_session_stream(&toy(20, 250), &cfg(12, 2, 4)).unwrap();
        let base = s.base();
        for c in base.labels() {
            assert_eq!(base.class_size(c), 200);
        }
        for c in s.test_sets[4].labels() {
            assert_eq!(s.test_sets[4].class_size(c), 50);
        }
        // train and test never share a sample
        let test: BTreeSet<u32> = s.test_sets[4].samples().iter().map(|(x, _)| *x).collect();
        for sess in &s.sessions {
            assert!(sess.samples().iter().all(|(x, _)| !test.contains(x)));
        }
    }

    #[test]
    fn toy_cumulative_union() {
        let s = build_session_stream(&toy(10, 10), &cfg(6, 2, 2)).unwrap();
        let got = cumulative_label_set(&s, 2).unwrap();
        let mut brute = BTreeSet::new();
        for t in 0..=2 {
            for c in s.sessions[t].labels() {
                brute.insert(c);
            }
        }
        assert_eq!(got, brute);
        assert_eq!(got.len(), 10);
        assert_eq!(cumulative_label_set(&s, 0).unwrap(), s.label_spaces[0]);
        assert!(matches!(
            cumulative_label_set(&s, 3),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn episode_shapes() {
        let d = toy(10, 30);
        let ep = sample_episode(&d, 5, 5, 15, 1).unwrap();
        assert_eq!(ep.support.len(), 25);
        assert_eq!(ep.query.len(), 75);
        let ep = sample_episode(&d, 1, 1, 0, 1).unwrap();
        assert_eq!(ep.support.len(), 1);
        assert!(ep.query.is_empty());
        assert_eq!(
            sample_episode(&d, 5, 5, 15, 9).unwrap(),
            sample_episode(&d, 5, 5, 15, 9).unwrap()
        );
    }

    #[test]
    fn episode_errors() {
        let d = toy(3, 4);
        assert!(matches!(
            sample_episode(&d, 4, 1, 0, 0),
            Err(Error::InsufficientClasses { .. })
        ));
        assert!(matches!(
            sample_episode(&d, 2, 3, 2, 0),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn description_lines() {
        let s = build_session_stream(&toy(10, 10), &cfg(6, 2, 2)).unwrap();
        let mut buf = Vec::new();
        s.write_description(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let recs: Vec<SessionRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(recs, s.describe());
        assert_eq!(recs[1].train_samples, 10);
    }
}
