//! End-to-end commands: corpus generation, image pre-training and
//! fine-tuning, text training, ensemble evaluation and the scaling benchmark.
//! Every command writes its artifacts plus a `manifest-<command>.json` under
//! the configured output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, load_image_model, load_text_model, save_checkpoint, ModelConfig};
use crate::config::{out_path, Reducer, RunConfig};
use crate::data::corpus::shuffled;
use crate::data::splits::{load_splits, save_splits};
use crate::data::{augment, generate_corpus, load_corpus, make_splits, resize, save_corpus, tokenize, AugmentConfig, Corpus, EncodedText, SplitPlan};
use crate::ensemble::{accuracy_of, fuse, grid_search_weights, mean_accuracy, median_accuracy, predict_class, FusionWeights};
use crate::error::{Error, Result};
use crate::model::{build_efficientnet, build_text_encoder, predict_proba, Classifier, ImageModel, ImageModelSpec, TextEncoderSpec, TextModel};
use crate::parallel::{measure_speedup, train_parallel, EpochLog, TrainData};
use crate::rng::rng_for;
use crate::tensor::{Scalar, Tensor};

pub const SPLITS_FILE: &str = "splits.json";
pub const METRICS_HEADER: &str = "epoch,train_loss,val_acc,lr";
pub const REPORT_HEADER: &str = "split_id,image_acc,text_acc,ensemble_acc,w1,w2";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: toml::Value,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
    pub wall_clock_seconds: f64,
    pub metrics: BTreeMap<String, f64>,
}

struct Run<'a> {
    cfg: &'a RunConfig,
    command: &'static str,
    start: Instant,
    inputs: BTreeMap<String, String>,
    artifacts: Vec<String>,
    metrics: BTreeMap<String, f64>,
}

impl<'a> Run<'a> {
    fn start(cfg: &'a RunConfig, command: &'static str) -> Result<Self> {
        fs::create_dir_all(&cfg.out)?;
        Ok(Self { cfg, command, start: Instant::now(), inputs: BTreeMap::new(), artifacts: Vec::new(), metrics: BTreeMap::new() })
    }

    fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.into(), path.display().to_string());
    }

    fn artifact(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.into());
        out_path(self.cfg, name)
    }

    fn metric(&mut self, name: &str, v: f64) {
        self.metrics.insert(name.into(), v);
    }

    fn finish(self) -> Result<RunManifest> {
        let m = RunManifest {
            command: self.command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: self.cfg.seed,
            config: toml::Value::try_from(self.cfg).map_err(|e| Error::Config(e.to_string()))?,
            inputs: self.inputs,
            artifacts: self.artifacts,
            wall_clock_seconds: self.start.elapsed().as_secs_f64(),
            metrics: self.metrics,
        };
        let path = out_path(self.cfg, &format!("manifest-{}.json", self.command));
        fs::write(path, serde_json::to_string_pretty(&m)?)?;
        Ok(m)
    }
}

/// Page images of `idx`, resized to `spec`'s input size, channels repeated
/// when the model expects more than one.
pub fn image_inputs<T: Scalar>(corpus: &Corpus, idx: &[usize], spec: &ImageModelSpec) -> Result<Vec<Tensor<T>>> {
    let size = spec.dims.input_size;
    idx.iter()
        .map(|&i| {
            let src = &corpus.docs[i].image;
            let img = if src.shape()[1] == size && src.shape()[2] == size { src.clone() } else { resize(src, size)? };
            let img: Tensor<T> = img.cast();
            match (img.shape()[0], spec.in_channels) {
                (a, b) if a == b => Ok(img),
                (1, c) => {
                    let plane = img.data();
                    let data: Vec<T> = (0..c).flat_map(|_| plane.iter().copied()).collect();
                    Tensor::new(&[c, size, size], data)
                }
                (a, b) => Err(Error::Incompatible(format!("corpus images have {a} channels, model expects {b}"))),
            }
        })
        .collect()
}

pub fn text_inputs(corpus: &Corpus, idx: &[usize], spec: &TextEncoderSpec) -> Result<Vec<EncodedText>> {
    idx.iter().map(|&i| tokenize(&corpus.docs[i].tokens, spec.max_len, spec.vocab_size)).collect()
}

fn labeled<I>(corpus: &Corpus, idx: &[usize], inputs: Vec<I>) -> Result<TrainData<I>> {
    let labels = idx.iter().map(|&i| corpus.docs[i].label).collect();
    TrainData::with_ids(inputs, labels, idx.iter().map(|&i| i as u64).collect())
}

pub fn image_data<T: Scalar>(corpus: &Corpus, idx: &[usize], spec: &ImageModelSpec) -> Result<TrainData<Tensor<T>>> {
    labeled(corpus, idx, image_inputs(corpus, idx, spec)?)
}

pub fn text_data(corpus: &Corpus, idx: &[usize], spec: &TextEncoderSpec) -> Result<TrainData<EncodedText>> {
    labeled(corpus, idx, text_inputs(corpus, idx, spec)?)
}

/// Shear augmentation as a trainer hook.
pub fn shear_hook<T: Scalar>(cfg: AugmentConfig) -> impl Fn(&Tensor<T>, u64) -> Result<Tensor<T>> + Sync {
    move |img, seed| if cfg.active(true) { augment(img, &cfg, &mut rng_for(seed, &[])) } else { Ok(img.clone()) }
}

/// Copies every non-head parameter of `pre` into a fresh network with
/// `num_classes` outputs; the head keeps its new random initialisation.
pub fn transfer_image_model<T: Scalar>(pre: &ImageModel<T>, num_classes: usize, seed: u64) -> Result<ImageModel<T>> {
    let spec = ImageModelSpec { num_classes, ..pre.spec.clone() };
    let mut m = build_efficientnet::<T>(&spec, seed)?;
    for p in m.params_mut().iter_mut() {
        if p.group == "head" {
            continue;
        }
        let src = pre.params().find(&p.name).ok_or_else(|| Error::Incompatible(format!("pretrained model lacks `{}`", p.name)))?;
        if src.value.shape() != p.value.shape() {
            return Err(Error::Incompatible(format!("`{}` has shape {:?}, expected {:?}", p.name, src.value.shape(), p.value.shape())));
        }
        p.value = src.value.clone();
    }
    Ok(m)
}

pub fn metrics_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for e in log {
        let val = e.val_acc.map(|v| format!("{v:.6}")).unwrap_or_default();
        s.push_str(&format!("{},{:.6},{},{:e}\n", e.epoch, e.train_loss, val, e.lr));
    }
    s
}

fn load_plan(data: &Path, split_id: usize) -> Result<(Vec<SplitPlan>, SplitPlan)> {
    let plans = load_splits(&data.join(SPLITS_FILE))?;
    let plan = plans
        .iter()
        .find(|p| p.split_id == split_id)
        .cloned()
        .ok_or_else(|| Error::Config(format!("split {split_id} not found among {} splits", plans.len())))?;
    Ok((plans, plan))
}

fn check_classes(corpus: &Corpus, model_classes: usize, what: &str) -> Result<()> {
    if corpus.spec.num_classes != model_classes {
        return Err(Error::Incompatible(format!(
            "{what} predicts {model_classes} classes but the corpus has {}",
            corpus.spec.num_classes
        )));
    }
    Ok(())
}

/// Generates the synthetic corpus and its split plans.
pub fn gen_data(cfg: &RunConfig) -> Result<RunManifest> {
    let mut run = Run::start(cfg, "gen-data")?;
    let corpus = generate_corpus(&cfg.corpus, cfg.seed)?;
    let plans = make_splits(&corpus.labels(), cfg.corpus.num_classes, &cfg.splits, cfg.seed)?;
    save_corpus(&corpus, &cfg.out)?;
    run.artifacts.push(crate::data::corpus::MANIFEST.into());
    save_splits(&plans, &run.artifact(SPLITS_FILE))?;
    run.metric("documents", corpus.len() as f64);
    run.metric("splits", plans.len() as f64);
    log::info!("generated {} documents, {} splits in {}", corpus.len(), plans.len(), cfg.out.display());
    run.finish()
}

/// Trains the image network from scratch on a random train/val/test split
/// of the corpus at `data`.
pub fn pretrain(cfg: &RunConfig, data: &Path) -> Result<RunManifest> {
    let mut run = Run::start(cfg, "pretrain")?;
    run.input("data", data);
    let corpus = load_corpus(data)?;
    let spec = cfg.image.spec(corpus.spec.num_classes)?;
    let order = shuffled(corpus.len(), cfg.seed, &[0x9E7]);
    let n_val = (corpus.len() as f64 * cfg.pretrain.val_frac).round() as usize;
    let n_test = (corpus.len() as f64 * cfg.pretrain.test_frac).round() as usize;
    let (val_idx, rest) = order.split_at(n_val);
    let (test_idx, train_idx) = rest.split_at(n_test);

    let train = image_data::<f32>(&corpus, train_idx, &spec)?;
    let val = image_data::<f32>(&corpus, val_idx, &spec)?;
    let model = build_efficientnet::<f32>(&spec, cfg.seed)?;
    log::info!("pretraining {} parameters on {} documents", model.count_params(), train.len());
    let hook = shear_hook::<f32>(cfg.pretrain.augment);
    let par = cfg.parallel_config(cfg.pretrain.batch_per_worker);
    let out = train_parallel(&model, &train, (!val.is_empty()).then_some(&val), &par, &cfg.pretrain.train_config(), Some(&hook))?;

    fs::write(run.artifact("pretrain_metrics.csv"), metrics_csv(&out.log))?;
    save_checkpoint(&run.artifact("pretrain.ckpt"), &ModelConfig::Image(spec.clone()), out.model.params())?;
    if !test_idx.is_empty() {
        let test = image_data::<f32>(&corpus, test_idx, &spec)?;
        run.metric("test_acc", crate::model::accuracy(&out.model, &test.inputs.iter().collect::<Vec<_>>(), &test.labels, 64)?);
    }
    if let Some(v) = out.log.last().and_then(|e| e.val_acc) {
        run.metric("val_acc", v);
    }
    run.metric("parameters", out.model.count_params() as f64);
    run.finish()
}

/// Fine-tunes a pre-trained image checkpoint on the configured split:
/// the head is re-initialised and only `finetune.trainable_groups` train.
pub fn finetune(cfg: &RunConfig, data: &Path, checkpoint: &Path) -> Result<RunManifest> {
    let mut run = Run::start(cfg, "finetune")?;
    run.input("data", data);
    run.input("checkpoint", checkpoint);
    let corpus = load_corpus(data)?;
    let (_, plan) = load_plan(data, cfg.split_id)?;
    let pre = load_image_model::<f32>(checkpoint)?;
    let model = transfer_image_model(&pre, corpus.spec.num_classes, cfg.seed)?;
    let spec = model.spec.clone();

    let train = image_data::<f32>(&corpus, &plan.train, &spec)?;
    let val = image_data::<f32>(&corpus, &plan.val, &spec)?;
    let hook = shear_hook::<f32>(cfg.finetune.augment);
    let par = cfg.parallel_config(cfg.finetune.batch_per_worker);
    let tc = cfg.finetune.train_config();
    let out = train_parallel(&model, &train, Some(&val), &par, &tc, Some(&hook))?;

    if let Some(keep) = &tc.trainable_groups {
        for g in model.params().groups().iter().filter(|g| !keep.contains(g)) {
            if model.params().group_checksum(g) != out.model.params().group_checksum(g) {
                return Err(Error::InvalidArgument(format!("frozen group `{g}` changed during fine-tuning")));
            }
        }
    }
    fs::write(run.artifact("finetune_metrics.csv"), metrics_csv(&out.log))?;
    save_checkpoint(&run.artifact("finetune.ckpt"), &ModelConfig::Image(spec.clone()), out.model.params())?;
    let test = image_data::<f32>(&corpus, &plan.test, &spec)?;
    run.metric("test_acc", crate::model::accuracy(&out.model, &test.inputs.iter().collect::<Vec<_>>(), &test.labels, 64)?);
    run.metric("trainable_parameters", out.model.params().count_trainable() as f64);
    run.finish()
}

/// Trains the text encoder on the configured split.
pub fn train_text(cfg: &RunConfig, data: &Path) -> Result<RunManifest> {
    let mut run = Run::start(cfg, "train-text")?;
    run.input("data", data);
    let corpus = load_corpus(data)?;
    let spec = cfg.text.model.clone();
    check_classes(&corpus, spec.num_classes, "text.model")?;
    if corpus.spec.vocab_size + crate::data::tokenize::NUM_SPECIAL as usize != spec.vocab_size {
        return Err(Error::Incompatible(format!(
            "corpus vocabulary {} does not fit encoder vocabulary {}",
            corpus.spec.vocab_size, spec.vocab_size
        )));
    }
    let (_, plan) = load_plan(data, cfg.split_id)?;
    let train = text_data(&corpus, &plan.train, &spec)?;
    let val = text_data(&corpus, &plan.val, &spec)?;
    let model = build_text_encoder::<f32>(&spec, cfg.seed)?;
    let par = cfg.parallel_config(cfg.text.train.batch_per_worker);
    let out = train_parallel(&model, &train, Some(&val), &par, &cfg.text.train.train_config(), None)?;

    fs::write(run.artifact("text_metrics.csv"), metrics_csv(&out.log))?;
    save_checkpoint(&run.artifact("text.ckpt"), &ModelConfig::Text(spec.clone()), out.model.params())?;
    let test = text_data(&corpus, &plan.test, &spec)?;
    run.metric("test_acc", crate::model::accuracy(&out.model, &test.inputs.iter().collect::<Vec<_>>(), &test.labels, 64)?);
    run.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split_id: usize,
    pub image_acc: f64,
    pub text_acc: f64,
    pub ensemble_acc: f64,
    pub weights: FusionWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub reducer: Reducer,
    pub splits: Vec<SplitResult>,
    pub median: SummaryRow,
    pub mean: SummaryRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub image_acc: f64,
    pub text_acc: f64,
    pub ensemble_acc: f64,
}

fn reduce(rows: &[SplitResult], f: fn(&[f64]) -> Result<f64>) -> Result<SummaryRow> {
    let col = |g: fn(&SplitResult) -> f64| rows.iter().map(g).collect::<Vec<_>>();
    Ok(SummaryRow {
        image_acc: f(&col(|r| r.image_acc))?,
        text_acc: f(&col(|r| r.text_acc))?,
        ensemble_acc: f(&col(|r| r.ensemble_acc))?,
    })
}

pub fn report_csv(s: &EnsembleSummary) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in &s.splits {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.4},{:.4}\n",
            r.split_id, r.image_acc, r.text_acc, r.ensemble_acc, r.weights.w1, r.weights.w2
        ));
    }
    let (label, row) = match s.reducer {
        Reducer::Median => ("median", s.median),
        Reducer::Mean => ("mean", s.mean),
    };
    out.push_str(&format!("{label},{:.6},{:.6},{:.6},,\n", row.image_acc, row.text_acc, row.ensemble_acc));
    out
}

/// Per-split evaluation of an image and a text model and their late fusion.
/// Documents in the training set of `exclude` are dropped from every test
/// set so the checkpoints are never scored on their own training data.
pub fn evaluate_splits<T: Scalar>(
    corpus: &Corpus,
    plans: &[SplitPlan],
    image: &ImageModel<T>,
    text: &TextModel<T>,
    weights: FusionWeights,
    grid_step: Option<f64>,
    exclude: &[usize],
) -> Result<Vec<SplitResult>> {
    let seen: std::collections::HashSet<usize> = exclude.iter().copied().collect();
    let probs = |idx: &[usize]| -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>)> {
        let imgs = image_inputs::<T>(corpus, idx, &image.spec)?;
        let txts = text_inputs(corpus, idx, &text.spec)?;
        let pi = predict_proba(image, &imgs.iter().collect::<Vec<_>>(), 64)?;
        let pt = predict_proba(text, &txts.iter().collect::<Vec<_>>(), 64)?;
        Ok((pt, pi, idx.iter().map(|&i| corpus.docs[i].label).collect()))
    };
    let mut rows = Vec::with_capacity(plans.len());
    for plan in plans {
        let w = match grid_step {
            Some(step) => {
                let (pt, pi, y) = probs(&plan.val)?;
                grid_search_weights(&pt, &pi, &y, step)?
            }
            None => weights,
        };
        let test: Vec<usize> = plan.test.iter().copied().filter(|i| !seen.contains(i)).collect();
        if test.is_empty() {
            return Err(Error::InfeasibleSplit(format!("split {} has no held-out test documents", plan.split_id)));
        }
        let (pt, pi, y) = probs(&test)?;
        let fused: Vec<usize> = pt.iter().zip(&pi).map(|(t, i)| fuse(t, i, w).map(|p| predict_class(&p))).collect::<Result<_>>()?;
        rows.push(SplitResult {
            split_id: plan.split_id,
            image_acc: accuracy_of(&pi, &y)?,
            text_acc: accuracy_of(&pt, &y)?,
            ensemble_acc: crate::ensemble::evaluate(&fused, &y)?,
            weights: w,
        });
    }
    Ok(rows)
}

pub fn ensemble_eval(cfg: &RunConfig, data: &Path, image_ckpt: &Path, text_ckpt: &Path) -> Result<RunManifest> {
    let mut run = Run::start(cfg, "ensemble-eval")?;
    run.input("data", data);
    run.input("image_checkpoint", image_ckpt);
    run.input("text_checkpoint", text_ckpt);
    let corpus = load_corpus(data)?;
    let (plans, trained_on) = load_plan(data, cfg.split_id)?;
    let image = load_image_model::<f32>(image_ckpt)?;
    let text = load_text_model::<f32>(text_ckpt)?;
    check_classes(&corpus, image.spec.num_classes, "image checkpoint")?;
    check_classes(&corpus, text.spec.num_classes, "text checkpoint")?;

    let mut exclude = trained_on.train.clone();
    exclude.extend(&trained_on.val);
    let rows = evaluate_splits(&corpus, &plans, &image, &text, cfg.ensemble.weights, cfg.ensemble.grid_step, &exclude)?;
    let summary = EnsembleSummary {
        reducer: cfg.ensemble.reducer,
        median: reduce(&rows, median_accuracy)?,
        mean: reduce(&rows, mean_accuracy)?,
        splits: rows,
    };
    fs::write(run.artifact("report.csv"), report_csv(&summary))?;
    fs::write(run.artifact("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    for (name, r) in [("median", summary.median), ("mean", summary.mean)] {
        run.metric(&format!("{name}_image_acc"), r.image_acc);
        run.metric(&format!("{name}_text_acc"), r.text_acc);
        run.metric(&format!("{name}_ensemble_acc"), r.ensemble_acc);
    }
    run.finish()
}

/// Throughput of the configured image network for each worker count,
/// trained at the constant peak rate.
/// Uses the corpus at `data` when given, else a freshly generated one.
pub fn bench_scaling(cfg: &RunConfig, data: Option<&Path>) -> Result<RunManifest> {
    let mut run = Run::start(cfg, "bench-scaling")?;
    let corpus = match data {
        Some(d) => {
            run.input("data", d);
            load_corpus(d)?
        }
        None => generate_corpus(&cfg.corpus, cfg.seed)?,
    };
    let spec = cfg.image.spec(corpus.spec.num_classes)?;
    let idx: Vec<usize> = (0..corpus.len()).collect();
    let train = image_data::<f32>(&corpus, &idx, &spec)?;
    let model = build_efficientnet::<f32>(&spec, cfg.seed)?;
    let mut par = cfg.parallel_config(cfg.bench.batch_per_worker);
    par.scaling = crate::parallel::Scaling::Weak;
    let mut tc = cfg.pretrain.train_config();
    tc.schedule = crate::parallel::LrSchedule::Constant;
    let report = measure_speedup(&model, &train, &cfg.bench.k_list, &par, &tc, cfg.bench.steps, cfg.bench.warmup)?;
    fs::write(run.artifact("scaling.csv"), report.to_csv())?;
    log::info!("{}", report.summary());
    for r in &report.rows {
        run.metric(&format!("speedup_k{}", r.k), r.speedup);
    }
    run.metric("hardware_threads", report.hardware_threads as f64);
    run.finish()
}

/// Kind recorded in a checkpoint header.
pub fn checkpoint_kind(path: &Path) -> Result<&'static str> {
    Ok(load_checkpoint::<f32>(path)?.0.kind())
}
