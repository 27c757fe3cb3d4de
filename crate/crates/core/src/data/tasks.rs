//! Meta-training tasks and fine-tuning splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Example;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub support: usize,
    pub query: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 100,
            validation: 100,
            test: 400,
            support: 1000,
            query: 1000,
        }
    }
}

/// One source language: support set D^tr and query set D^ts.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaTask {
    pub task_id: String,
    pub support: Vec<Example>,
    pub query: Vec<Example>,
}

/// Carves a disjoint support and query set from each source, in order.
pub fn build_meta_dataset(sources: &[(String, Vec<Example>)], split: &SplitSpec) -> Result<Vec<MetaTask>> {
    if split.support == 0 || split.query == 0 {
        return Err(Error::Data("support and query sizes must be positive".into()));
    }
    sources
        .iter()
        .map(|(id, examples)| {
            let need = split.support + split.query;
            if examples.len() < need {
                return Err(Error::Data(format!(
                    "source `{id}` has {} sequences, support+query needs {need}",
                    examples.len()
                )));
            }
            Ok(MetaTask {
                task_id: id.clone(),
                support: examples[..split.support].to_vec(),
                query: examples[split.support..need].to_vec(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetSplits {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
}

/// Consecutive, disjoint train/validation/test slices of a target corpus.
pub fn split_target(id: &str, examples: &[Example], split: &SplitSpec) -> Result<TargetSplits> {
    let need = split.train + split.validation + split.test;
    if examples.len() < need {
        return Err(Error::Data(format!(
            "target `{id}` has {} sequences, train+validation+test needs {need}",
            examples.len()
        )));
    }
    let (a, b) = (split.train, split.train + split.validation);
    Ok(TargetSplits {
        train: examples[..a].to_vec(),
        validation: examples[a..b].to_vec(),
        test: examples[b..need].to_vec(),
    })
}

/// Mini-batch order over a fixed dataset: a seeded shuffle per epoch,
/// reshuffled each time the data is exhausted. Batches never straddle epochs.
#[derive(Clone, Debug)]
pub struct BatchCursor {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    epoch: usize,
}

impl BatchCursor {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Data("cannot batch an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut c = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..len).collect(),
            pos: 0,
            batch_size,
            epoch: 0,
        };
        c.order.shuffle(&mut c.rng);
        Ok(c)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        batch
    }

    pub fn next_batch(&mut self, data: &[Example]) -> Vec<Example> {
        assert_eq!(data.len(), self.order.len(), "cursor built for another dataset");
        self.next_indices().into_iter().map(|i| data[i].clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn examples(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                tokens: vec![3 + i],
                labels: vec![0],
            })
            .collect()
    }

    #[test]
    fn one_task_per_source_with_disjoint_sets() {
        let split = SplitSpec {
            support: 5,
            query: 3,
            ..SplitSpec::default()
        };
        let tasks =
            build_meta_dataset(&[("a".into(), examples(10)), ("b".into(), examples(8))], &split).unwrap();
        assert_eq!(tasks.len(), 2);
        for t in &tasks {
            assert_eq!((t.support.len(), t.query.len()), (5, 3));
            let s: HashSet<_> = t.support.iter().collect();
            assert!(t.query.iter().all(|q| !s.contains(q)));
        }
    }

    #[test]
    fn insufficient_data_is_a_sizing_error() {
        let split = SplitSpec {
            support: 5,
            query: 5,
            ..SplitSpec::default()
        };
        let err = build_meta_dataset(&[("a".into(), examples(9))], &split).unwrap_err();
        assert!(err.to_string().contains("needs 10"));
        assert!(split_target("t", &examples(10), &SplitSpec::default()).is_err());
    }

    #[test]
    fn target_splits_are_disjoint() {
        let split = SplitSpec {
            train: 3,
            validation: 2,
            test: 4,
            ..SplitSpec::default()
        };
        let s = split_target("t", &examples(12), &split).unwrap();
        let all: HashSet<_> = s.train.iter().chain(&s.validation).chain(&s.test).collect();
        assert_eq!(all.len(), 9);
    }

    #[test]
    fn cursor_covers_each_epoch_and_reshuffles() {
        let mut c = BatchCursor::new(10, 4, 3).unwrap();
        let mut first = Vec::new();
        for _ in 0..3 {
            first.extend(c.next_indices());
        }
        assert_eq!(first.len(), 10);
        let mut sorted = first.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        let mut second = Vec::new();
        for _ in 0..3 {
            second.extend(c.next_indices());
        }
        assert_eq!(c.epoch(), 1);
        assert_ne!(first, second);
        let mut again = BatchCursor::new(10, 4, 3).unwrap();
        assert_eq!(again.next_indices(), first[..4]);
    }
}
