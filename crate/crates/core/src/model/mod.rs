//! Network family builders and the classifier interface shared by trainers.

pub mod efficientnet;
pub mod params;
pub mod scaling;
pub mod text;

pub use efficientnet::{build_efficientnet, build_mbconv, stack_images, ImageModel, ImageModelSpec, LayerInfo, MbConv, OpKind, StageSpec};
pub use params::{Param, ParamId, ParamStore};
pub use scaling::{compound_scale, conv_output_dims, Binding, ScaledDims, ScalingSpec};
pub use text::{build_text_encoder, Activation, EncodedText, TextEncoderSpec, TextModel};

use crate::autodiff::{Graph, Reduction, Var};
use crate::error::{shape_err, Error, Result};
use crate::rng::derive;
use crate::tensor::Scalar;

/// Per-step context for stochastic layers.
#[derive(Debug, Clone, Copy)]
pub struct ForwardCtx<'a> {
    pub train: bool,
    pub seed: u64,
    pub step: u64,
    /// Global identity of each batch row; drives dropout masks.
    pub sample_ids: &'a [u64],
}

impl<'a> ForwardCtx<'a> {
    pub fn eval(sample_ids: &'a [u64]) -> Self {
        Self { train: false, seed: 0, step: 0, sample_ids }
    }

    /// One seed per row for a tensor holding `rows_per_sample` rows per
    /// sample, distinct per dropout `site`.
    pub fn row_seeds(&self, site: u64, rows_per_sample: usize) -> Vec<u64> {
        let mut out = Vec::with_capacity(self.sample_ids.len() * rows_per_sample);
        for &id in self.sample_ids {
            let base = derive(self.seed, &[self.step, id, site]);
            out.extend((0..rows_per_sample as u64).map(|r| derive(base, &[r])));
        }
        out
    }

    pub fn dropout_rate(&self, rate: f64) -> f64 {
        if self.train {
            rate
        } else {
            0.0
        }
    }
}

/// A classifier over some input type, differentiable through [`Graph`].
pub trait Classifier<T: Scalar>: Clone + Send + Sync {
    type Input: Sync;

    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    fn num_classes(&self) -> usize;

    /// Builds the forward pass for `batch` using the bound parameter vars
    /// and returns unnormalized logits `[batch, classes]`.
    fn logits(&self, g: &mut Graph<T>, params: &[Var], batch: &[&Self::Input], ctx: &ForwardCtx) -> Result<Var>;
}

/// Cross-entropy loss and flat parameter gradient for one batch.
pub fn loss_and_grad<T: Scalar, M: Classifier<T>>(
    model: &M,
    batch: &[&M::Input],
    labels: &[usize],
    ctx: &ForwardCtx,
    reduction: Reduction,
) -> Result<(f64, Vec<T>)> {
    if batch.len() != labels.len() || batch.len() != ctx.sample_ids.len() {
        return shape_err("batch, labels and sample ids differ in length");
    }
    let mut g = Graph::new();
    let vars = model.params().bind(&mut g);
    let logits = model.logits(&mut g, &vars, batch, ctx)?;
    let loss = g.softmax_cross_entropy(logits, labels, reduction)?;
    g.backward(loss)?;
    let grads = model.params().gather_grads(&g, &vars);
    let mut off = 0;
    for p in model.params().iter() {
        let n = p.value.numel();
        if grads[off..off + n].iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        off += n;
    }
    Ok((g.value(loss).item()?.as_f64(), grads))
}

/// Class probabilities in eval mode, computed `chunk` rows at a time.
pub fn predict_proba<T: Scalar, M: Classifier<T>>(model: &M, inputs: &[&M::Input], chunk: usize) -> Result<Vec<Vec<f64>>> {
    let classes = model.num_classes();
    let mut out = Vec::with_capacity(inputs.len());
    for part in inputs.chunks(chunk.max(1)) {
        let ids = vec![0u64; part.len()];
        let mut g = Graph::new();
        let vars: Vec<Var> = model.params().iter().map(|p| g.input(p.value.clone())).collect();
        let logits = model.logits(&mut g, &vars, part, &ForwardCtx::eval(&ids))?;
        let probs = g.softmax(logits);
        out.extend(g.value(probs).data().chunks_exact(classes).map(|r| r.iter().map(|v| v.as_f64()).collect()));
    }
    Ok(out)
}

/// Fraction of `inputs` whose highest-probability class equals the label.
pub fn accuracy<T: Scalar, M: Classifier<T>>(model: &M, inputs: &[&M::Input], labels: &[usize], chunk: usize) -> Result<f64> {
    if inputs.is_empty() {
        return Ok(0.0);
    }
    let probs = predict_proba(model, inputs, chunk)?;
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, &y)| crate::ensemble::predict_class(p) == y)
        .count();
    Ok(hits as f64 / inputs.len() as f64)
}
