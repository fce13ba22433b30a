//! Pseudo-incremental tasks drawn from the base session.
//!
//! `N` label-disjoint episodes are sampled, then virtual classes are minted
//! by mixing index-aligned samples of two different episodes:
//! `z = lambda * z^{t1} + (1 - lambda) * z^{t2}` with one `lambda ~ Beta(a, b)`
//! per virtual class.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};

use super::objective::TaskBatch;
use crate::backbone::{stack, Embedding};
use crate::protocol::{sample_episode_from, ClassId, Episode, LabelSet, LabeledDataset};
use crate::seed::{self, tag};
use crate::{Error, Result};

/// Mixup weight in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct MixCoefficient(f64);

impl MixCoefficient {
    pub fn new(lambda: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&lambda) {
            Ok(MixCoefficient(lambda))
        } else {
            Err(Error::ConfigInvalid(format!("mix coefficient {lambda} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn manifold_mixup(z1: ArrayView1<'_, f64>, z2: ArrayView1<'_, f64>, lambda: MixCoefficient) -> Result<Embedding> {
    if z1.len() != z2.len() {
        return Err(Error::DimensionMismatch {
            expected: z1.len(),
            got: z2.len(),
        });
    }
    let l = lambda.value();
    Ok(z1.iter().zip(z2).map(|(a, b)| l * a + (1.0 - l) * b).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualClass {
    pub label: ClassId,
    pub lambda: MixCoefficient,
    /// Source classes in episodes `t1` and `t2`.
    pub sources: (ClassId, ClassId),
    pub support: Vec<Embedding>,
    pub query: Vec<Embedding>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoTask {
    pub episodes: Vec<Episode<Embedding>>,
    pub virtual_classes: Vec<VirtualClass>,
    /// Queries drawn from the base classes left out of every episode; they
    /// keep old classes in the evaluation, as in a real session.
    pub context_queries: Vec<(Embedding, ClassId)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoTaskSpec {
    pub tasks: usize,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub virtual_per_pair: usize,
    /// Queries per context class.
    pub context_query: usize,
    pub beta: (f64, f64),
    pub fixed_lambda: Option<f64>,
}

impl PseudoTask {
    /// Labels of the real (base) classes drawn into the episodes.
    pub fn real_labels(&self) -> LabelSet {
        self.episodes.iter().flat_map(|e| e.classes()).collect()
    }

    /// One support set per episode plus one for all virtual classes; queries
    /// from every episode and virtual class.
    pub fn to_batch(&self) -> Result<TaskBatch> {
        let mut supports = Vec::new();
        let mut query_rows: Vec<&Array1<f64>> = Vec::new();
        let mut query_labels = Vec::new();
        let dim = self
            .episodes
            .first()
            .and_then(|e| e.support.first())
            .map_or(0, |(z, _)| z.len());
        for ep in &self.episodes {
            let rows: Vec<&Array1<f64>> = ep.support.iter().map(|(z, _)| z).collect();
            supports.push((stack(&rows, dim)?, ep.support.iter().map(|(_, y)| *y).collect()));
            for (z, y) in &ep.query {
                query_rows.push(z);
                query_labels.push(*y);
            }
        }
        if !self.virtual_classes.is_empty() {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for v in &self.virtual_classes {
                rows.extend(v.support.iter());
                labels.extend(std::iter::repeat_n(v.label, v.support.len()));
                for z in &v.query {
                    query_rows.push(z);
                    query_labels.push(v.label);
                }
            }
            supports.push((stack(&rows, dim)?, labels));
        }
        for (z, y) in &self.context_queries {
            query_rows.push(z);
            query_labels.push(*y);
        }
        Ok(TaskBatch {
            supports,
            queries: if query_rows.is_empty() {
                Array2::zeros((0, dim))
            } else {
                stack(&query_rows, dim)?
            },
            query_labels,
        })
    }
}

fn class_rows(items: &[(Embedding, ClassId)], class: ClassId) -> Vec<&Embedding> {
    items.iter().filter(|(_, y)| *y == class).map(|(z, _)| z).collect()
}

pub fn sample_pseudo_task(base: &LabeledDataset<Embedding>, spec: &PseudoTaskSpec, seed: u64) -> Result<PseudoTask> {
    let needed = spec.tasks * spec.way;
    if base.class_count() < needed {
        return Err(Error::InsufficientClasses {
            needed,
            available: base.class_count(),
        });
    }
    let mut classes: Vec<ClassId> = base.labels().collect();
    classes.shuffle(&mut seed::rng(seed, tag::META_ITERATION));
    let episodes = classes
        .chunks_exact(spec.way)
        .take(spec.tasks)
        .enumerate()
        .map(|(i, group)| {
            sample_episode_from(
                base,
                group,
                spec.way,
                spec.shot,
                spec.query,
                seed::derive2(seed, tag::EPISODE, i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut virtual_classes = Vec::new();
    if spec.tasks >= 2 {
        let fresh_base = base.labels().last().map_or(0, |c| c.0 + 1);
        let beta = Beta::new(spec.beta.0, spec.beta.1).map_err(|e| Error::ConfigInvalid(format!("beta: {e}")))?;
        let mut rng = seed::rng(seed, tag::MIXUP);
        for t1 in 0..spec.tasks {
            let t2 = (t1 + 1) % spec.tasks;
            let (c1s, c2s) = (episodes[t1].classes(), episodes[t2].classes());
            for v in 0..spec.virtual_per_pair {
                let slot = (t1 + v) % spec.way;
                let (c1, c2) = (c1s[slot], c2s[slot]);
                let lambda = MixCoefficient::new(spec.fixed_lambda.unwrap_or_else(|| beta.sample(&mut rng)))?;
                let mix = |a: Vec<&Embedding>, b: Vec<&Embedding>| -> Result<Vec<Embedding>> {
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| manifold_mixup(x.view(), y.view(), lambda))
                        .collect()
                };
                let support = mix(
                    class_rows(&episodes[t1].support, c1),
                    class_rows(&episodes[t2].support, c2),
                )?;
                let query = mix(class_rows(&episodes[t1].query, c1), class_rows(&episodes[t2].query, c2))?;
                virtual_classes.push(VirtualClass {
                    label: ClassId(fresh_base + virtual_classes.len() as u32),
                    lambda,
                    sources: (c1, c2),
                    support,
                    query,
                });
            }
        }
    }
    let mut context_queries = Vec::new();
    if spec.context_query > 0 {
        let mut rng = seed::rng(seed, tag::CONTEXT_QUERY);
        for &c in &classes[spec.tasks * spec.way..] {
            let mut idx = base.class_indices(c).to_vec();
            idx.shuffle(&mut rng);
            for &i in idx.iter().take(spec.context_query) {
                context_queries.push(base.sample(i).clone());
            }
        }
    }
    Ok(PseudoTask {
        episodes,
        virtual_classes,
        context_queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn base(classes: u32, per_class: usize) -> LabeledDataset<Embedding> {
        let mut s = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                s.push((array![c as f64, i as f64, 1.0], ClassId(c)));
            }
        }
        LabeledDataset::new(s)
    }

    fn spec() -> PseudoTaskSpec {
        PseudoTaskSpec {
            tasks: 2,
            way: 5,
            shot: 3,
            query: 2,
            virtual_per_pair: 1,
            context_query: 0,
            beta: (2.0, 2.0),
            fixed_lambda: None,
        }
    }

    #[test]
    fn mixup_endpoints() {
        let (a, b) = (array![1.0, 0.0], array![0.0, 1.0]);
        assert_eq!(
            manifold_mixup(a.view(), b.view(), MixCoefficient::new(1.0).unwrap()).unwrap(),
            a
        );
        assert_eq!(
            manifold_mixup(a.view(), b.view(), MixCoefficient::new(0.0).unwrap()).unwrap(),
            b
        );
        assert_eq!(
            manifold_mixup(a.view(), b.view(), MixCoefficient::new(0.5).unwrap()).unwrap(),
            array![0.5, 0.5]
        );
        assert!(manifold_mixup(a.view(), array![1.0].view(), MixCoefficient::new(0.5).unwrap()).is_err());
        assert!(MixCoefficient::new(1.5).is_err());
    }

    #[test]
    fn episodes_disjoint_and_virtual_fresh() {
        let task = sample_pseudo_task(&base(10, 6), &spec(), 4).unwrap();
        let a: LabelSet = task.episodes[0].classes().into_iter().collect();
        let b: LabelSet = task.episodes[1].classes().into_iter().collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), 10);
        assert_eq!(task.virtual_classes.len(), 2);
        for v in &task.virtual_classes {
            assert!(v.label.0 >= 10);
            assert_eq!(v.support.len(), 3);
            assert_eq!(v.query.len(), 2);
        }
    }

    #[test]
    fn lambda_one_copies_first_episode() {
        let s = PseudoTaskSpec {
            fixed_lambda: Some(1.0),
            ..spec()
        };
        let task = sample_pseudo_task(&base(10, 6), &s, 4).unwrap();
        let v = &task.virtual_classes[0];
        let src = class_rows(&task.episodes[0].support, v.sources.0);
        for (z, s) in v.support.iter().zip(src) {
            assert_eq!(z, s);
        }
    }

    #[test]
    fn too_few_classes() {
        assert!(matches!(
            sample_pseudo_task(&base(8, 6), &spec(), 0),
            Err(Error::InsufficientClasses {
                needed: 10,
                available: 8
            })
        ));
    }

    #[test]
    fn batch_layout() {
        let task = sample_pseudo_task(&base(10, 6), &spec(), 4).unwrap();
        let batch = task.to_batch().unwrap();
        assert_eq!(batch.supports.len(), 3);
        assert_eq!(batch.supports[0].0.nrows(), 15);
        assert_eq!(batch.supports[2].0.nrows(), 6);
        assert_eq!(batch.queries.nrows(), 2 * 5 * 2 + 2 * 2);
    }

    #[test]
    fn context_queries_come_from_left_out_classes() {
        let s = PseudoTaskSpec {
            way: 3,
            context_query: 2,
            ..spec()
        };
        let task = sample_pseudo_task(&base(10, 6), &s, 1).unwrap();
        let real = task.real_labels();
        assert_eq!(task.context_queries.len(), 4 * 2);
        assert!(task.context_queries.iter().all(|(_, y)| !real.contains(y)));
        assert_eq!(task.to_batch().unwrap().queries.nrows(), 2 * 3 * 2 + 2 * 2 + 8);
    }
}
