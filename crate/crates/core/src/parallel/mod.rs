//! Synchronous data-parallel training and its scaling benchmark.

pub mod allreduce;
pub mod bench;
pub mod trainer;

use serde::{Deserialize, Serialize};

pub use allreduce::{naive_allreduce, ring_allreduce, Collective, ReduceKind};
pub use bench::{measure_speedup, SpeedupReport, SpeedupRow};
pub use trainer::{train_parallel, EpochLog, LrSchedule, TrainConfig, TrainData, TrainOutcome};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    /// `n` is the per-worker batch; the global batch grows with `k`.
    #[default]
    Weak,
    /// `n` is the global batch, split across workers.
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParallelConfig {
    pub k: usize,
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub reduction: ReduceKind,
    #[serde(default = "yes")]
    pub deterministic: bool,
    #[serde(default)]
    pub scaling: Scaling,
    /// Compare replicas after every step and fail on divergence.
    #[serde(default = "debug_default")]
    pub verify_replicas: bool,
}

fn yes() -> bool {
    true
}

fn debug_default() -> bool {
    cfg!(debug_assertions)
}

/// Largest parameter difference tolerated between replicas.
pub const REPLICA_TOLERANCE: f64 = 1e-6;

impl ParallelConfig {
    pub fn new(k: usize, n: usize, seed: u64) -> Self {
        Self {
            k,
            n,
            seed,
            reduction: ReduceKind::Ring,
            deterministic: true,
            scaling: Scaling::Weak,
            verify_replicas: debug_default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n == 0 {
            return invalid("worker count and batch size must be >= 1");
        }
        if self.scaling == Scaling::Strong && self.n % self.k != 0 {
            return invalid(format!("global batch {} not divisible by {} workers", self.n, self.k));
        }
        if let Ok(hw) = std::thread::available_parallelism() {
            if self.k > hw.get() {
                log::warn!("{} workers exceed {} available hardware threads", self.k, hw);
            }
        }
        Ok(())
    }

    pub fn per_worker_batch(&self) -> usize {
        match self.scaling {
            Scaling::Weak => self.n,
            Scaling::Strong => self.n / self.k,
        }
    }

    pub fn global_batch(&self) -> usize {
        self.per_worker_batch() * self.k
    }
}

/// Splits `batch` into `k` contiguous equal shards.
pub fn shard_batch(batch: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || batch.len() % k != 0 {
        return invalid(format!("batch of {} cannot be split across {k} workers", batch.len()));
    }
    Ok(batch.chunks(batch.len() / k).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn shard_examples() {
        let b: Vec<usize> = (0..8).collect();
        assert_eq!(shard_batch(&b, 1).unwrap(), vec![b.clone()]);
        assert_eq!(shard_batch(&b, 2).unwrap(), vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]]);
        assert!(shard_batch(&b, 3).is_err());
    }

    #[test]
    fn batch_sizes() {
        let mut c = ParallelConfig::new(4, 32, 0);
        assert_eq!(c.global_batch(), 128);
        c.scaling = Scaling::Strong;
        assert_eq!(c.per_worker_batch(), 8);
        c.n = 30;
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn shards_disjoint_and_cover(k in 1usize..8, per in 1usize..16, seed in any::<u64>()) {
            let perm = crate::data::corpus::shuffled(k * per, seed, &[]);
            let shards = shard_batch(&perm, k).unwrap();
            let mut seen = HashSet::new();
            for s in &shards {
                prop_assert_eq!(s.len(), per);
                for &i in s {
                    prop_assert!(seen.insert(i));
                }
            }
            prop_assert_eq!(seen.len(), k * per);
        }
    }
}

#[cfg(test)]
mod trainer_tests;
