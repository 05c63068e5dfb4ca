//! Repeated stratified train/val/test splits with a per-class quota.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{derive, rng_for};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub split_id: usize,
    pub seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitProtocol {
    pub n_splits: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub per_class_quota: usize,
}

impl SplitProtocol {
    pub fn reference() -> Self {
        Self { n_splits: 10, train_size: 800, val_size: 200, per_class_quota: 100 }
    }
}

/// `n_splits` plans: per split, `per_class_quota` documents of each class
/// form the train+val pool (shuffled, first `train_size` to train), and
/// everything else is test.
pub fn make_splits(labels: &[usize], num_classes: usize, proto: &SplitProtocol, seed: u64) -> Result<Vec<SplitPlan>> {
    let pool = proto.per_class_quota * num_classes;
    if pool != proto.train_size + proto.val_size {
        return Err(Error::InfeasibleSplit(format!(
            "quota {} x {num_classes} classes = {pool}, but train + val = {}",
            proto.per_class_quota,
            proto.train_size + proto.val_size
        )));
    }
    if proto.n_splits == 0 {
        return invalid("n_splits must be positive");
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return invalid(format!("label {y} out of range for {num_classes} classes"));
        }
        by_class[y].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < proto.per_class_quota {
            return Err(Error::InfeasibleSplit(format!(
                "class {c} has {} documents, quota is {}",
                members.len(),
                proto.per_class_quota
            )));
        }
    }
    let mut plans = Vec::with_capacity(proto.n_splits);
    for split_id in 0..proto.n_splits {
        let split_seed = derive(seed, &[split_id as u64]);
        let mut rng = rng_for(split_seed, &[]);
        let mut in_pool = vec![false; labels.len()];
        let mut pool_idx = Vec::with_capacity(pool);
        for members in &by_class {
            let mut m = members.clone();
            m.shuffle(&mut rng);
            for &i in &m[..proto.per_class_quota] {
                in_pool[i] = true;
                pool_idx.push(i);
            }
        }
        pool_idx.shuffle(&mut rng);
        let mut train = pool_idx[..proto.train_size].to_vec();
        let mut val = pool_idx[proto.train_size..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        let test = (0..labels.len()).filter(|&i| !in_pool[i]).collect();
        plans.push(SplitPlan { split_id, seed: split_seed, train, val, test });
    }
    Ok(plans)
}

pub fn save_splits(plans: &[SplitPlan], path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(plans)?)?;
    Ok(())
}

pub fn load_splits(path: &Path) -> Result<Vec<SplitPlan>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
