//! Minibatch index sampling.

use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{stream, StreamTag};
use crate::{Error, Result};

/// How workers draw examples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Independent uniform draws from the whole dataset on every worker.
    #[default]
    WithReplacement,
    /// One shared permutation per epoch, split evenly across workers.
    WithoutReplacement,
}

const CACHED_EPOCHS: usize = 4;

/// Deterministic batch sampler. `batch(k, t)` depends only on the
/// configuration, the worker and the step.
#[derive(Debug)]
pub struct Sampler {
    kind: Sampling,
    dataset: Option<u64>,
    workers: usize,
    local_batch: usize,
    seed: u64,
    batches_per_epoch: u64,
    cache: Mutex<Vec<(u64, Arc<Vec<u64>>)>>,
}

impl Sampler {
    /// `dataset = None` means an unbounded population, which only supports
    /// sampling with replacement.
    pub fn new(
        kind: Sampling,
        dataset: Option<u64>,
        workers: usize,
        local_batch: usize,
        seed: u64,
    ) -> Result<Self> {
        if workers == 0 || local_batch == 0 {
            return Err(Error::param(
                "local_batch",
                "workers and batch size must be positive",
            ));
        }
        let batches_per_epoch = match (kind, dataset) {
            (Sampling::WithoutReplacement, None) => {
                return Err(Error::param(
                    "sampling",
                    "without_replacement needs a finite dataset",
                ))
            }
            (Sampling::WithoutReplacement, Some(n)) => {
                let per_worker = n / workers as u64;
                let m = per_worker / local_batch as u64;
                if m == 0 {
                    return Err(Error::param(
                        "dataset_size",
                        format!("{n} examples cannot give each of {workers} workers a batch of {local_batch}"),
                    ));
                }
                m
            }
            (Sampling::WithReplacement, Some(0)) => {
                return Err(Error::param("dataset_size", "dataset is empty"))
            }
            (Sampling::WithReplacement, _) => 0,
        };
        Ok(Sampler {
            kind,
            dataset,
            workers,
            local_batch,
            seed,
            batches_per_epoch,
            cache: Mutex::new(Vec::new()),
        })
    }

    /// Batches each worker reads per epoch without replacement.
    pub fn batches_per_epoch(&self) -> u64 {
        self.batches_per_epoch
    }

    fn permutation(&self, epoch: u64) -> Arc<Vec<u64>> {
        let mut cache = self.cache.lock().expect("sampler cache poisoned");
        if let Some((_, p)) = cache.iter().find(|(e, _)| *e == epoch) {
            return Arc::clone(p);
        }
        let n = self.dataset.expect("checked in new");
        let mut perm: Vec<u64> = (0..n).collect();
        perm.shuffle(&mut stream(self.seed, 0, StreamTag::Permutation, epoch));
        let perm = Arc::new(perm);
        if cache.len() == CACHED_EPOCHS {
            cache.remove(0);
        }
        cache.push((epoch, Arc::clone(&perm)));
        perm
    }

    /// Example indices for worker `k` at global step `t`.
    pub fn batch(&self, k: usize, t: u64) -> Vec<u64> {
        match self.kind {
            Sampling::WithReplacement => {
                let mut rng = stream(self.seed, k as u64, StreamTag::Sample, t);
                (0..self.local_batch)
                    .map(|_| match self.dataset {
                        Some(n) => rng.random_range(0..n),
                        None => rng.random(),
                    })
                    .collect()
            }
            Sampling::WithoutReplacement => {
                let epoch = t / self.batches_per_epoch;
                let j = (t % self.batches_per_epoch) as usize;
                let perm = self.permutation(epoch);
                let part = perm.len() / self.workers;
                let start = k * part + j * self.local_batch;
                perm[start..start + self.local_batch].to_vec()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn single_worker_epoch_is_a_partition() {
        let s = Sampler::new(Sampling::WithoutReplacement, Some(8), 1, 4, 3).unwrap();
        let mut seen: Vec<u64> = s.batch(0, 0).into_iter().chain(s.batch(0, 1)).collect();
        seen.sort();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
        // Next epoch uses a different order of the same set.
        let mut next: Vec<u64> = s.batch(0, 2).into_iter().chain(s.batch(0, 3)).collect();
        next.sort();
        assert_eq!(next, seen);
    }

    #[test]
    fn workers_get_disjoint_slices() {
        let s = Sampler::new(Sampling::WithoutReplacement, Some(18), 2, 3, 9).unwrap();
        assert_eq!(s.batches_per_epoch(), 3);
        let set = |k| -> BTreeSet<u64> { (0..3).flat_map(|t| s.batch(k, t)).collect() };
        let (a, b) = (set(0), set(1));
        assert_eq!((a.len(), b.len()), (9, 9));
        assert!(a.is_disjoint(&b));
        let union: BTreeSet<u64> = a.union(&b).copied().collect();
        assert_eq!(union, (0..18).collect());
    }

    #[test]
    fn leftover_examples_wait_for_the_next_epoch() {
        // 20 examples, 2 workers, batch 3: each worker owns 10 slots and reads 9.
        let s = Sampler::new(Sampling::WithoutReplacement, Some(20), 2, 3, 9).unwrap();
        let perm = s.permutation(0);
        let read: Vec<u64> = (0..3).flat_map(|t| s.batch(0, t)).collect();
        assert_eq!(read, perm[..9].to_vec());
        let read: Vec<u64> = (0..3).flat_map(|t| s.batch(1, t)).collect();
        assert_eq!(read, perm[10..19].to_vec());
        assert_eq!(s.batch(0, 3), s.permutation(1)[..3].to_vec());
    }

    #[test]
    fn with_replacement_is_reproducible() {
        let a = Sampler::new(Sampling::WithReplacement, Some(1000), 4, 8, 5).unwrap();
        let b = Sampler::new(Sampling::WithReplacement, Some(1000), 4, 8, 5).unwrap();
        for t in 0..20 {
            for k in 0..4 {
                assert_eq!(a.batch(k, t), b.batch(k, t));
            }
        }
        assert_ne!(a.batch(0, 0), a.batch(1, 0));
        assert!(a.batch(2, 7).iter().all(|&i| i < 1000));
    }

    #[test]
    fn rejects_impossible_partitions() {
        assert!(Sampler::new(Sampling::WithoutReplacement, None, 1, 1, 0).is_err());
        assert!(Sampler::new(Sampling::WithoutReplacement, Some(7), 2, 4, 0).is_err());
        assert!(Sampler::new(Sampling::WithReplacement, Some(0), 1, 1, 0).is_err());
    }
}
