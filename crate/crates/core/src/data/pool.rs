use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// How a batch of labeled samples was annotated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    /// Human label and human saliency mask.
    HumanMask,
    /// Human label, mask generated by a model.
    AiMask,
    /// Human label only.
    LabelOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryEvent {
    pub iteration: usize,
    pub ids: Vec<String>,
    pub source: AnnotationSource,
}

/// Labeled/unlabeled partition of the training set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolState {
    labeled: BTreeSet<String>,
    unlabeled: BTreeSet<String>,
    total: usize,
    pub iteration: usize,
    pub human_annotated: usize,
    pub ai_annotated: usize,
    pub history: Vec<QueryEvent>,
}

/// `floor(fraction × total)`, at least one.
pub fn query_size(fraction: f64, total: usize) -> usize {
    ((fraction * total as f64 + 1e-9).floor() as usize).max(1)
}

/// Stratified initial pool: one random sample per class, the rest uniform.
pub fn init_pool(train: &Dataset, start_fraction: f64, seed: u64) -> Result<PoolState> {
    if !(start_fraction > 0.0 && start_fraction <= 1.0) {
        return Err(Error::Config(format!("start_fraction must lie in (0, 1], got {start_fraction}")));
    }
    let total = train.len();
    let n = (start_fraction * total as f64).round() as usize;
    if n < train.num_classes {
        return Err(Error::Config(format!(
            "start_fraction {start_fraction} labels {n} of {total} samples but {} classes need one each (short by {})",
            train.num_classes,
            train.num_classes - n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled = BTreeSet::new();
    for class in 0..train.num_classes {
        let members: Vec<&str> = train
            .samples()
            .iter()
            .filter(|s| s.label == class)
            .map(|s| s.id.as_str())
            .collect();
        let pick = members.choose(&mut rng).ok_or_else(|| {
            Error::Config(format!("class {class} has no training samples"))
        })?;
        labeled.insert(pick.to_string());
    }
    let mut rest: Vec<&str> = train.ids().filter(|id| !labeled.contains(*id)).collect();
    rest.shuffle(&mut rng);
    labeled.extend(rest.into_iter().take(n - labeled.len()).map(str::to_string));
    let unlabeled = train
        .ids()
        .filter(|id| !labeled.contains(*id))
        .map(str::to_string)
        .collect();
    Ok(PoolState {
        labeled,
        unlabeled,
        total,
        iteration: 0,
        human_annotated: 0,
        ai_annotated: 0,
        history: Vec::new(),
    })
}

impl PoolState {
    pub fn labeled(&self) -> &BTreeSet<String> {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &BTreeSet<String> {
        &self.unlabeled
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn budget_fraction(&self) -> f64 {
        self.labeled.len() as f64 / self.total as f64
    }

    fn tally(&mut self, n: usize, source: AnnotationSource) {
        match source {
            AnnotationSource::HumanMask => self.human_annotated += n,
            AnnotationSource::AiMask => self.ai_annotated += n,
            AnnotationSource::LabelOnly => {}
        }
    }

    /// Records how the initial labeled set was annotated, without advancing
    /// the iteration.
    pub fn record_initial(&mut self, source: AnnotationSource) {
        let ids: Vec<String> = self.labeled.iter().cloned().collect();
        self.tally(ids.len(), source);
        self.history.push(QueryEvent {
            iteration: self.iteration,
            ids,
            source,
        });
    }

    /// Moves `ids` from the unlabeled to the labeled set. Leaves the state
    /// untouched on error.
    pub fn add_query(&mut self, ids: &[String], source: AnnotationSource) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Invariant(format!("id {id} queried twice in one batch")));
            }
            if self.labeled.contains(id) {
                return Err(Error::Invariant(format!("id {id} is already labeled")));
            }
            if !self.unlabeled.contains(id) {
                return Err(Error::Invariant(format!("id {id} is not in the pool")));
            }
        }
        for id in ids {
            self.unlabeled.remove(id);
            self.labeled.insert(id.clone());
        }
        self.tally(ids.len(), source);
        self.history.push(QueryEvent {
            iteration: self.iteration,
            ids: ids.to_vec(),
            source,
        });
        self.iteration += 1;
        Ok(())
    }

    /// Partition invariant: disjoint sets covering the training set.
    pub fn check_partition(&self) -> Result<()> {
        if self.labeled.len() + self.unlabeled.len() != self.total {
            return Err(Error::Invariant("labeled ∪ unlabeled does not cover the train set".into()));
        }
        if self.labeled.intersection(&self.unlabeled).next().is_some() {
            return Err(Error::Invariant("labeled and unlabeled sets overlap".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Image, Sample, Split};
    use proptest::prelude::*;

    fn dataset(n: usize, classes: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| Sample::new(format!("s{i:03}"), Image::zeros((2, 2, 1)), i % classes))
            .collect();
        Dataset::new("t", Split::Train, (0..classes).map(|c| c.to_string()).collect(), samples).unwrap()
    }

    #[test]
    fn start_fraction_sets_labeled_size() {
        let pool = init_pool(&dataset(100, 2), 0.05, 1).unwrap();
        assert_eq!(pool.labeled().len(), 5);
        assert_eq!(pool.unlabeled().len(), 95);
        assert_eq!(pool, init_pool(&dataset(100, 2), 0.05, 1).unwrap());
    }

    #[test]
    fn stratification_is_forced_at_the_limit() {
        let ds = dataset(100, 10);
        let pool = init_pool(&ds, 0.1, 4).unwrap();
        let mut classes: Vec<usize> = pool.labeled().iter().map(|id| ds.get(id).unwrap().label).collect();
        classes.sort();
        assert_eq!(classes, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn too_small_start_names_the_deficit() {
        let err = init_pool(&dataset(100, 10), 0.05, 0).unwrap_err();
        assert!(err.to_string().contains("short by 5"), "{err}");
    }

    #[test]
    fn add_query_moves_ids() {
        let mut pool = init_pool(&dataset(100, 2), 0.05, 1).unwrap();
        let ids: Vec<String> = pool.unlabeled().iter().take(5).cloned().collect();
        pool.add_query(&ids, AnnotationSource::HumanMask).unwrap();
        assert_eq!(pool.labeled().len(), 10);
        assert_eq!(pool.unlabeled().len(), 90);
        assert_eq!(pool.human_annotated, 5);
        assert_eq!(pool.iteration, 1);
    }

    #[test]
    fn empty_query_only_advances_iteration() {
        let mut pool = init_pool(&dataset(20, 2), 0.1, 1).unwrap();
        let before = pool.labeled().clone();
        pool.add_query(&[], AnnotationSource::LabelOnly).unwrap();
        assert_eq!(pool.labeled(), &before);
        assert_eq!(pool.iteration, 1);
    }

    #[test]
    fn duplicate_or_labeled_ids_are_rejected() {
        let mut pool = init_pool(&dataset(20, 2), 0.1, 1).unwrap();
        let free = pool.unlabeled().iter().next().unwrap().clone();
        let snapshot = pool.clone();
        assert!(pool.add_query(&[free.clone(), free.clone()], AnnotationSource::HumanMask).is_err());
        let taken = pool.labeled().iter().next().unwrap().clone();
        assert!(pool.add_query(&[taken], AnnotationSource::HumanMask).is_err());
        assert_eq!(pool, snapshot);
    }

    #[test]
    fn query_size_floors_with_minimum_one() {
        assert_eq!(query_size(0.05, 300), 15);
        assert_eq!(query_size(0.05, 10), 1);
        assert_eq!(query_size(0.05, 39), 1);
    }

    proptest! {
        #[test]
        fn partition_and_budget_hold_over_query_sequences(
            seed in 0u64..1000,
            q in 1usize..6,
            steps in 0usize..10,
        ) {
            let total = 60;
            let mut pool = init_pool(&dataset(total, 3), 0.1, seed).unwrap();
            let start = pool.labeled().len();
            let mut last = pool.budget_fraction();
            for i in 0..steps {
                let take = q.min(pool.unlabeled().len());
                let ids: Vec<String> = pool.unlabeled().iter().rev().take(take).cloned().collect();
                pool.add_query(&ids, AnnotationSource::AiMask).unwrap();
                pool.check_partition().unwrap();
                prop_assert!(pool.budget_fraction() >= last);
                last = pool.budget_fraction();
                if (start + (i + 1) * q) <= total {
                    prop_assert_eq!(pool.budget_fraction(), (start + (i + 1) * q) as f64 / total as f64);
                }
            }
        }
    }
}
