//! Weak-scaling throughput benchmark over worker counts.

use serde::{Deserialize, Serialize};

use super::trainer::{run, StepLimit, TrainConfig, TrainData};
use super::ParallelConfig;
use crate::error::{invalid, Result};
use crate::model::Classifier;
use crate::tensor::Scalar;

/// Environment variable capping the worker counts a benchmark will run.
pub const MAX_WORKERS_ENV: &str = "DOCSCALE_MAX_WORKERS";

/// Time reduction reported for B0 on four GPUs.
pub const REFERENCE_TIME_REDUCTION_4: f64 = 0.754;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub k: usize,
    pub wall_seconds: f64,
    pub samples_per_sec: f64,
    pub speedup: f64,
    pub efficiency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub per_worker_batch: usize,
    pub steps: usize,
    pub warmup: usize,
    pub hardware_threads: usize,
    pub rows: Vec<SpeedupRow>,
}

impl SpeedupReport {
    pub const CSV_HEADER: &'static str = "k,wall_seconds,samples_per_sec,speedup,efficiency";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{:.6},{:.3},{:.4},{:.4}\n", r.k, r.wall_seconds, r.samples_per_sec, r.speedup, r.efficiency));
        }
        out
    }

    pub fn speedup(&self, k: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.k == k).map(|r| r.speedup)
    }

    /// Speedup implied by the published four-GPU time reduction.
    pub fn reference_speedup() -> f64 {
        1.0 / (1.0 - REFERENCE_TIME_REDUCTION_4)
    }

    /// Human-readable table with the published reference point alongside.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "weak scaling, n = {} per worker, {} timed steps after {} warmup, {} hardware threads\n",
            self.per_worker_batch, self.steps, self.warmup, self.hardware_threads
        );
        for r in &self.rows {
            s.push_str(&format!(
                "  k = {}: {:.3} s, {:.1} samples/s, S = {:.3}, E = {:.3}\n",
                r.k, r.wall_seconds, r.samples_per_sec, r.speedup, r.efficiency
            ));
        }
        s.push_str(&format!(
            "  reference: {:.1}% time reduction on 4 GPUs, S(4) ~ {:.2}\n",
            REFERENCE_TIME_REDUCTION_4 * 100.0,
            Self::reference_speedup()
        ));
        s
    }
}

fn worker_cap() -> Option<usize> {
    std::env::var(MAX_WORKERS_ENV).ok().and_then(|v| v.parse().ok())
}

/// Runs `warmup + steps` synchronous steps for each `k` with fixed
/// per-worker batch and reports throughput relative to `k = 1`. The speedup
/// `S(k)` is the ratio of the time one worker needs for the same number of
/// samples to the time `k` workers need.
pub fn measure_speedup<T: Scalar, M: Classifier<T>>(
    model: &M,
    data: &TrainData<M::Input>,
    k_list: &[usize],
    base: &ParallelConfig,
    cfg: &TrainConfig,
    steps: usize,
    warmup: usize,
) -> Result<SpeedupReport> {
    if steps == 0 {
        return invalid("benchmark needs at least one timed step");
    }
    let mut ks: Vec<usize> = k_list.to_vec();
    ks.push(1);
    ks.sort_unstable();
    ks.dedup();
    if let Some(cap) = worker_cap() {
        let dropped: Vec<usize> = ks.iter().copied().filter(|&k| k > cap).collect();
        if !dropped.is_empty() {
            log::warn!("{MAX_WORKERS_ENV}={cap}: skipping worker counts {dropped:?}");
        }
        ks.retain(|&k| k <= cap.max(1));
    }
    let n = base.n;
    let mut rows: Vec<SpeedupRow> = Vec::with_capacity(ks.len());
    for &k in &ks {
        let par = ParallelConfig { k, verify_replicas: false, ..*base };
        let out = run(model, data, None, &par, cfg, None, Some(StepLimit { warmup, steps }))?;
        let secs = out.timed_seconds.max(f64::MIN_POSITIVE);
        let sps = (steps * n * k) as f64 / secs;
        let base_sps = rows.first().map_or(sps, |r| r.samples_per_sec);
        let speedup = sps / base_sps;
        rows.push(SpeedupRow { k, wall_seconds: secs, samples_per_sec: sps, speedup, efficiency: speedup / k as f64 });
    }
    Ok(SpeedupReport {
        per_worker_batch: n,
        steps,
        warmup,
        hardware_threads: std::thread::available_parallelism().map_or(1, |v| v.get()),
        rows,
    })
}
