//! Synchronous data-parallel SGD over `k` worker threads.
//!
//! Each step draws one global batch of `n * k` samples, gives worker `r` the
//! `r`-th contiguous shard, all-reduces the summed per-shard gradients and
//! divides by `n * k`. Every replica then applies the same optimizer step.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::allreduce::Collective;
use super::{ParallelConfig, REPLICA_TOLERANCE};
use crate::autodiff::Reduction;
use crate::data::corpus::shuffled;
use crate::error::{invalid, shape_err, Error, Result};
use crate::model::{accuracy, loss_and_grad, Classifier, ForwardCtx};
use crate::optim::{layerwise_lrs, reference_lr, stlr_lr, LayerwiseDecayConfig, LrPlan, Optimizer, OptimizerConfig, StlrConfig};
use crate::rng::derive;
use crate::tensor::Scalar;

/// Labeled inputs with a stable global id per sample.
#[derive(Debug, Clone)]
pub struct TrainData<I> {
    pub inputs: Vec<I>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

impl<I> TrainData<I> {
    pub fn new(inputs: Vec<I>, labels: Vec<usize>) -> Result<Self> {
        let ids = (0..inputs.len() as u64).collect();
        Self::with_ids(inputs, labels, ids)
    }

    pub fn with_ids(inputs: Vec<I>, labels: Vec<usize>, ids: Vec<u64>) -> Result<Self> {
        if inputs.len() != labels.len() || inputs.len() != ids.len() {
            return shape_err("inputs, labels and ids differ in length");
        }
        Ok(Self { inputs, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Per-sample transform applied on the training path, given a seed derived
/// from `(run seed, epoch, sample id)`.
pub type AugmentFn<'a, I> = &'a (dyn Fn(&I, u64) -> Result<I> + Sync);

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    Stlr {
        #[serde(default = "cut_frac")]
        cut_frac: f64,
        #[serde(default = "ratio")]
        ratio: f64,
    },
}

fn cut_frac() -> f64 {
    0.1
}

fn ratio() -> f64 {
    32.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    /// Peak learning rate, or the base of `base * n * k / 256` when
    /// `linear_scaling` is set.
    pub base_lr: f64,
    #[serde(default)]
    pub linear_scaling: bool,
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Per-group rates for encoder-style models; overrides `base_lr`.
    #[serde(default)]
    pub layerwise: Option<LayerwiseDecayConfig>,
    /// Groups left trainable; all others are frozen.
    #[serde(default)]
    pub trainable_groups: Option<Vec<String>>,
    #[serde(default = "eval_chunk")]
    pub eval_chunk: usize,
}

fn eval_chunk() -> usize {
    64
}

impl TrainConfig {
    pub fn new(epochs: usize, optimizer: OptimizerConfig, base_lr: f64) -> Self {
        Self {
            epochs,
            optimizer,
            base_lr,
            linear_scaling: false,
            schedule: LrSchedule::Constant,
            layerwise: None,
            trainable_groups: None,
            eval_chunk: eval_chunk(),
        }
    }

    /// Rates at the schedule's peak for a run with `par`.
    pub fn peak_plan<T: Scalar>(&self, par: &ParallelConfig, params: &crate::model::ParamStore<T>) -> Result<LrPlan> {
        if let Some(lw) = &self.layerwise {
            let layers = params.groups().iter().filter(|g| g.starts_with("layer.")).count();
            return Ok(layerwise_lrs(lw, layers)?.to_plan());
        }
        let eta = if self.linear_scaling { reference_lr(self.base_lr, par.per_worker_batch(), par.k)? } else { self.base_lr };
        if !(eta > 0.0) {
            return invalid(format!("learning rate {eta} must be positive"));
        }
        Ok(LrPlan::Uniform(eta))
    }

    fn factor(&self, t: usize, total: usize) -> Result<f64> {
        match self.schedule {
            LrSchedule::Constant => Ok(1.0),
            LrSchedule::Stlr { cut_frac, ratio } => {
                stlr_lr(t, &StlrConfig { eta_max: 1.0, total_steps: total, cut_frac, ratio })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Mean training loss over the epoch's samples.
    pub train_loss: f64,
    /// Largest learning rate used during the epoch.
    pub lr: f64,
    pub val_acc: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub log: Vec<EpochLog>,
    pub steps: usize,
    /// Wall time of the steps after warmup.
    pub timed_seconds: f64,
}

/// Bounds for a fixed-length run.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StepLimit {
    pub warmup: usize,
    pub steps: usize,
}

const EPOCH_TAG: u64 = 0xE90C;
const AUG_TAG: u64 = 0xA116;

/// Trains `model` on `train` with `k` synchronous workers, logging
/// validation accuracy after each epoch when `val` is given.
pub fn train_parallel<T: Scalar, M: Classifier<T>>(
    model: &M,
    train: &TrainData<M::Input>,
    val: Option<&TrainData<M::Input>>,
    par: &ParallelConfig,
    cfg: &TrainConfig,
    augment: Option<AugmentFn<M::Input>>,
) -> Result<TrainOutcome<M>> {
    run(model, train, val, par, cfg, augment, None)
}

pub(crate) fn run<T: Scalar, M: Classifier<T>>(
    model: &M,
    train: &TrainData<M::Input>,
    val: Option<&TrainData<M::Input>>,
    par: &ParallelConfig,
    cfg: &TrainConfig,
    augment: Option<AugmentFn<M::Input>>,
    limit: Option<StepLimit>,
) -> Result<TrainOutcome<M>> {
    par.validate()?;
    let n = par.per_worker_batch();
    let k = par.k;
    let global = n * k;
    let steps_per_epoch = train.len() / global;
    if steps_per_epoch == 0 {
        return invalid(format!("{} training samples cannot fill one global batch of {global}", train.len()));
    }
    let total_steps = match limit {
        Some(l) => l.warmup + l.steps,
        None => cfg.epochs * steps_per_epoch,
    };
    if total_steps == 0 {
        return invalid("training run has no steps");
    }
    let epochs = total_steps.div_ceil(steps_per_epoch);

    let mut model = model.clone();
    if let Some(groups) = &cfg.trainable_groups {
        let g: Vec<&str> = groups.iter().map(String::as_str).collect();
        model.params_mut().train_only(&g)?;
    }
    let peak = cfg.peak_plan(par, model.params())?;
    cfg.factor(0, total_steps)?;
    let num_params = model.params().count();
    let optimizer = Optimizer::new(cfg.optimizer, num_params)?;
    let coll = Collective::<T>::new(k, par.reduction, par.deterministic);

    let worker = |rank: usize| -> Result<Option<TrainOutcome<M>>> {
        let mut replica = model.clone();
        let mut opt = optimizer.clone();
        let mut log = Vec::new();
        let mut step = 0usize;
        let mut timer: Option<Instant> = None;
        // Rank 0 evaluates alone; a failure there is raised at the next collective.
        let mut pending: Option<Error> = None;
        if limit.is_some_and(|l| l.warmup == 0) {
            timer = Some(Instant::now());
        }
        'epochs: for epoch in 0..epochs {
            let started = Instant::now();
            let perm = shuffled(train.len(), par.seed, &[EPOCH_TAG, epoch as u64]);
            let (mut loss_sum, mut seen, mut lr_max, mut epoch_steps) = (0.0, 0usize, 0.0f64, 0usize);
            for b in 0..steps_per_epoch {
                if step >= total_steps {
                    break 'epochs;
                }
                let shard = &perm[b * global + rank * n..b * global + (rank + 1) * n];
                let ids: Vec<u64> = shard.iter().map(|&i| train.ids[i]).collect();
                let labels: Vec<usize> = shard.iter().map(|&i| train.labels[i]).collect();
                let local = (|| -> Result<(f64, Vec<T>)> {
                    let ctx = ForwardCtx { train: true, seed: par.seed, step: step as u64, sample_ids: &ids };
                    match augment {
                        Some(f) => {
                            let owned = shard
                                .iter()
                                .map(|&i| f(&train.inputs[i], derive(par.seed, &[AUG_TAG, epoch as u64, train.ids[i]])))
                                .collect::<Result<Vec<_>>>()?;
                            let refs: Vec<&M::Input> = owned.iter().collect();
                            loss_and_grad(&replica, &refs, &labels, &ctx, Reduction::Sum)
                        }
                        None => {
                            let refs: Vec<&M::Input> = shard.iter().map(|&i| &train.inputs[i]).collect();
                            loss_and_grad(&replica, &refs, &labels, &ctx, Reduction::Sum)
                        }
                    }
                })();
                let local = match pending.take() {
                    Some(e) => Err(e),
                    None => local,
                };
                let (mut buf, failure) = match local {
                    Ok((loss, mut g)) => {
                        g.push(T::from_f64(loss));
                        g.push(T::zero());
                        (g, None)
                    }
                    Err(e) => {
                        let mut g = vec![T::zero(); num_params + 2];
                        g[num_params + 1] = T::one();
                        (g, Some(e))
                    }
                };
                coll.allreduce(rank, &mut buf);
                if buf[num_params + 1] > T::zero() {
                    return Err(failure.unwrap_or(Error::PeerFailure));
                }
                let denom = T::from_f64(global as f64);
                let batch_loss = buf[num_params].as_f64();
                buf.truncate(num_params);
                for g in buf.iter_mut() {
                    *g = *g / denom;
                }
                let plan = peak.scaled(cfg.factor(step, total_steps)?);
                lr_max = lr_max.max(plan.max());
                opt.step(replica.params_mut(), &buf, &plan)?;
                if par.verify_replicas && k > 1 {
                    let all = coll.all_gather(rank, &replica.params().flatten());
                    let dev = all[1..]
                        .iter()
                        .flat_map(|o| o.iter().zip(&all[0]).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()))
                        .fold(0.0, f64::max);
                    if dev > REPLICA_TOLERANCE {
                        return Err(Error::ReplicaDivergence(format!("step {step}: replicas differ by {dev:e}")));
                    }
                }
                step += 1;
                epoch_steps += 1;
                loss_sum += batch_loss;
                seen += global;
                if limit.is_some_and(|l| l.warmup == step) {
                    timer = Some(Instant::now());
                }
            }
            if rank == 0 && limit.is_none() {
                let val_acc = match val {
                    Some(v) if !v.is_empty() => {
                        let refs: Vec<&M::Input> = v.inputs.iter().collect();
                        match accuracy(&replica, &refs, &v.labels, cfg.eval_chunk) {
                            Ok(a) => Some(a),
                            Err(e) => {
                                pending = Some(e);
                                None
                            }
                        }
                    }
                    _ => None,
                };
                let entry = EpochLog {
                    epoch: epoch + 1,
                    steps: epoch_steps,
                    train_loss: loss_sum / seen.max(1) as f64,
                    lr: lr_max,
                    val_acc,
                    seconds: started.elapsed().as_secs_f64(),
                };
                log::info!(
                    "epoch {} loss {:.4} lr {:.3e} val_acc {}",
                    entry.epoch,
                    entry.train_loss,
                    entry.lr,
                    entry.val_acc.map_or("-".into(), |a| format!("{a:.4}"))
                );
                log.push(entry);
            }
        }
        coll.barrier();
        if let Some(e) = pending {
            return Err(e);
        }
        let timed_seconds = timer.map_or(0.0, |t| t.elapsed().as_secs_f64());
        Ok((rank == 0).then_some(TrainOutcome { model: replica, log, steps: step, timed_seconds }))
    };

    let results: Vec<Result<Option<TrainOutcome<M>>>> = if k == 1 {
        vec![worker(0)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..k).map(|r| s.spawn(move || worker(r))).collect();
            handles.into_iter().map(|h| h.join().expect("worker thread panicked")).collect()
        })
    };
    let mut first_err = None;
    let mut outcome = None;
    for r in results {
        match r {
            Ok(Some(o)) => outcome = Some(o),
            Ok(None) => {}
            Err(Error::PeerFailure) => {
                first_err.get_or_insert(Error::PeerFailure);
            }
            Err(e) => {
                if matches!(first_err, None | Some(Error::PeerFailure)) {
                    first_err = Some(e);
                }
            }
        }
    }
    match (first_err, outcome) {
        (Some(e), _) => Err(e),
        (None, Some(o)) => Ok(o),
        (None, None) => unreachable!("rank 0 always reports"),
    }
}
