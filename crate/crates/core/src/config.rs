//! Run configuration: built-in desk defaults, layered TOML files, then
//! command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::tokenize::NUM_SPECIAL;
use crate::data::{AugmentConfig, CorpusSpec, SplitProtocol};
use crate::ensemble::FusionWeights;
use crate::error::{Error, Result};
use crate::model::scaling::compound_scale;
use crate::model::{ImageModelSpec, ScaledDims, ScalingSpec, StageSpec, TextEncoderSpec};
use crate::optim::{AdamConfig, LayerwiseDecayConfig, OptimizerConfig, SgdConfig};
use crate::parallel::{LrSchedule, ParallelConfig, ReduceKind, Scaling, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSection {
    pub in_channels: usize,
    pub head_channels: usize,
    pub dropout: f64,
    pub scaling: ScalingSpec,
    pub base_input_size: usize,
    /// Named B-series (width, depth, resolution); overrides `scaling`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Pixels per side, overriding the scaled resolution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_size: Option<usize>,
    pub stages: Vec<StageSpec>,
}

impl ImageSection {
    pub fn dims(&self) -> Result<ScaledDims> {
        let mut d = match &self.preset {
            Some(p) => ScaledDims::preset(p)?,
            None => compound_scale(&self.scaling, self.base_input_size)?,
        };
        if let Some(s) = self.input_size {
            d.input_size = s;
        }
        Ok(d)
    }

    pub fn spec(&self, num_classes: usize) -> Result<ImageModelSpec> {
        Ok(ImageModelSpec {
            in_channels: self.in_channels,
            stages: self.stages.clone(),
            head_channels: self.head_channels,
            num_classes,
            dropout: self.dropout,
            dims: self.dims()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_per_worker: usize,
    pub base_lr: f64,
    pub linear_scaling: bool,
    pub optimizer: OptimizerConfig,
    pub schedule: LrSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layerwise: Option<LayerwiseDecayConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable_groups: Option<Vec<String>>,
    pub augment: AugmentConfig,
    /// Held-out fractions when a command splits its corpus randomly.
    #[serde(default = "holdout")]
    pub val_frac: f64,
    #[serde(default = "holdout")]
    pub test_frac: f64,
}

fn holdout() -> f64 {
    0.1
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            optimizer: self.optimizer,
            base_lr: self.base_lr,
            linear_scaling: self.linear_scaling,
            schedule: self.schedule,
            layerwise: self.layerwise,
            trainable_groups: self.trainable_groups.clone(),
            eval_chunk: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelSection {
    pub workers: usize,
    pub reduction: ReduceKind,
    pub scaling: Scaling,
    pub verify_replicas: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reducer {
    Median,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub weights: FusionWeights,
    /// When set, weights are grid-searched on each split's validation set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_step: Option<f64>,
    pub reducer: Reducer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextSection {
    pub model: TextEncoderSpec,
    pub train: TrainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub k_list: Vec<usize>,
    pub steps: usize,
    pub warmup: usize,
    pub batch_per_worker: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub out: PathBuf,
    /// Split plan used for training the fine-tuned and text models.
    pub split_id: usize,
    pub corpus: CorpusSpec,
    pub splits: SplitProtocol,
    pub parallel: ParallelSection,
    pub image: ImageSection,
    pub pretrain: TrainSection,
    pub finetune: TrainSection,
    pub text: TextSection,
    pub ensemble: EnsembleSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    /// The desk profile.
    fn default() -> Self {
        let sgd = OptimizerConfig::Sgd(SgdConfig { momentum: 0.9, weight_decay: 0.0 });
        let stlr = LrSchedule::Stlr { cut_frac: 0.1, ratio: 32.0 };
        Self {
            seed: 7,
            deterministic: true,
            out: PathBuf::from("runs/desk"),
            split_id: 0,
            corpus: CorpusSpec::desk(4, 60),
            splits: SplitProtocol { n_splits: 3, train_size: 128, val_size: 32, per_class_quota: 40 },
            parallel: ParallelSection { workers: 1, reduction: ReduceKind::Ring, scaling: Scaling::Weak, verify_replicas: false },
            image: ImageSection {
                in_channels: 1,
                head_channels: 64,
                dropout: 0.0,
                scaling: ScalingSpec::default(),
                base_input_size: 32,
                preset: None,
                input_size: None,
                stages: StageSpec::micro_table(),
            },
            pretrain: TrainSection {
                epochs: 20,
                batch_per_worker: 8,
                base_lr: 1.6,
                linear_scaling: true,
                optimizer: sgd,
                schedule: stlr,
                layerwise: None,
                trainable_groups: None,
                augment: AugmentConfig::default(),
                val_frac: 0.1,
                test_frac: 0.1,
            },
            finetune: TrainSection {
                epochs: 5,
                batch_per_worker: 8,
                base_lr: 12.8,
                linear_scaling: true,
                optimizer: sgd,
                schedule: stlr,
                layerwise: None,
                trainable_groups: Some(vec!["head".into()]),
                augment: AugmentConfig::default(),
                val_frac: 0.1,
                test_frac: 0.1,
            },
            text: TextSection {
                model: TextEncoderSpec::desk(4),
                train: TrainSection {
                    epochs: 5,
                    batch_per_worker: 6,
                    base_lr: 2e-3,
                    linear_scaling: false,
                    optimizer: OptimizerConfig::Adam(AdamConfig::default()),
                    schedule: LrSchedule::Constant,
                    layerwise: Some(LayerwiseDecayConfig { eta_top: 2e-3, eta_body: 2e-3, xi: 0.95 }),
                    trainable_groups: None,
                    augment: AugmentConfig { enabled: false, ..AugmentConfig::default() },
                    val_frac: 0.1,
                    test_frac: 0.1,
                },
            },
            ensemble: EnsembleSection { weights: FusionWeights::default(), grid_step: None, reducer: Reducer::Median },
            bench: BenchSection { k_list: vec![1, 2, 4], steps: 20, warmup: 3, batch_per_worker: 16 },
        }
    }
}

/// Command-line values that take precedence over files.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub batch_per_worker: Option<usize>,
    pub deterministic: Option<bool>,
    pub out: Option<PathBuf>,
}

fn merge(base: &mut toml::Value, layer: toml::Value) {
    match (base, layer) {
        (toml::Value::Table(b), toml::Value::Table(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, l) => *b = l,
    }
}

fn cfg_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    /// Defaults, then each file in order (tables merge key by key).
    pub fn load(files: &[PathBuf]) -> Result<Self> {
        let mut v = toml::Value::try_from(RunConfig::default()).map_err(cfg_err)?;
        for f in files {
            let text = std::fs::read_to_string(f).map_err(|e| Error::Config(format!("{}: {e}", f.display())))?;
            let layer: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", f.display())))?;
            merge(&mut v, layer);
        }
        let cfg: RunConfig = v.try_into().map_err(cfg_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut v = toml::Value::try_from(RunConfig::default()).map_err(cfg_err)?;
        merge(&mut v, toml::from_str(text).map_err(cfg_err)?);
        let cfg: RunConfig = v.try_into().map_err(cfg_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(cfg_err)
    }

    /// Applies overrides; `batch_per_worker` goes to every training section.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(k) = o.workers {
            self.parallel.workers = k;
        }
        if let Some(n) = o.batch_per_worker {
            self.pretrain.batch_per_worker = n;
            self.finetune.batch_per_worker = n;
            self.text.train.batch_per_worker = n;
            self.bench.batch_per_worker = n;
        }
        if let Some(d) = o.deterministic {
            self.deterministic = d;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        self.validate()
    }

    pub fn parallel_config(&self, batch_per_worker: usize) -> ParallelConfig {
        ParallelConfig {
            k: self.parallel.workers,
            n: batch_per_worker,
            seed: self.seed,
            reduction: self.parallel.reduction,
            deterministic: self.deterministic,
            scaling: self.parallel.scaling,
            verify_replicas: self.parallel.verify_replicas,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::InvalidArgument(m) | Error::Shape(m) | Error::Config(m) => Error::Config(m),
            other => other,
        };
        self.corpus.validate().map_err(wrap)?;
        self.text.model.validate().map_err(wrap)?;
        self.image.spec(self.corpus.num_classes).map_err(wrap)?;
        if self.parallel.workers == 0 {
            return Err(Error::Config("parallel.workers must be >= 1".into()));
        }
        for (name, t) in [("pretrain", &self.pretrain), ("finetune", &self.finetune), ("text.train", &self.text.train)] {
            t.optimizer.validate().map_err(wrap)?;
            t.augment.validate().map_err(wrap)?;
            if t.batch_per_worker == 0 || t.epochs == 0 {
                return Err(Error::Config(format!("{name}: epochs and batch_per_worker must be >= 1")));
            }
            if self.parallel.scaling == Scaling::Strong && t.batch_per_worker % self.parallel.workers != 0 {
                return Err(Error::Config(format!(
                    "{name}: batch {} not divisible by {} workers",
                    t.batch_per_worker, self.parallel.workers
                )));
            }
            if !(0.0..1.0).contains(&(t.val_frac + t.test_frac)) {
                return Err(Error::Config(format!("{name}: val_frac + test_frac must lie in [0, 1)")));
            }
        }
        let expected_vocab = self.corpus.vocab_size + NUM_SPECIAL as usize;
        if self.text.model.vocab_size != expected_vocab {
            return Err(Error::Config(format!(
                "text.model.vocab_size = {} but corpus vocabulary {} plus {} special tokens = {expected_vocab}",
                self.text.model.vocab_size, self.corpus.vocab_size, NUM_SPECIAL
            )));
        }
        if self.text.model.num_classes != self.corpus.num_classes {
            return Err(Error::Config(format!(
                "text.model.num_classes = {} but corpus has {} classes",
                self.text.model.num_classes, self.corpus.num_classes
            )));
        }
        self.ensemble.weights.validate().map_err(wrap)?;
        if self.bench.k_list.is_empty() || self.bench.k_list.contains(&0) || self.bench.steps == 0 {
            return Err(Error::Config("bench needs a nonempty k_list of positive counts and steps >= 1".into()));
        }
        Ok(())
    }
}

/// Path of `name` inside the run's output directory.
pub fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    Path::new(&cfg.out).join(name)
}
