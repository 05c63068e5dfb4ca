//! SGD and Adam, learning-rate schedules and parameter freezing.

pub mod schedule;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use schedule::{layerwise_lrs, reference_lr, stlr_lr, LayerwiseDecayConfig, LayerwiseLrs, StlrConfig, LR_UNDERFLOW};

use crate::error::{invalid, shape_err, Error, Result};
use crate::model::ParamStore;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { momentum: default_momentum(), weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_wd() -> f64 {
    0.01
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: default_beta1(), beta2: default_beta2(), epsilon: default_eps(), weight_decay: default_wd() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd(SgdConfig),
    Adam(AdamConfig),
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            OptimizerConfig::Sgd(c) => {
                if !(0.0..1.0).contains(&c.momentum) || !(c.weight_decay >= 0.0) {
                    return invalid("sgd momentum must lie in [0, 1) and weight decay be >= 0");
                }
            }
            OptimizerConfig::Adam(c) => {
                if !(0.0..1.0).contains(&c.beta1) || !(0.0..1.0).contains(&c.beta2) || !(c.epsilon >= 0.0) || !(c.weight_decay >= 0.0) {
                    return invalid("adam betas must lie in [0, 1); epsilon and weight decay >= 0");
                }
            }
        }
        Ok(())
    }
}

/// `v <- m v + g + wd p; p <- p - lr v`, elementwise.
pub fn sgd_update(p: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, cfg: &SgdConfig) {
    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
        *p -= lr * *v;
    }
}

/// Bias-corrected Adam at step `t >= 1` with the L2 term `wd p` added to
/// the gradient.
pub fn adam_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, t: u64, cfg: &AdamConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..p.len() {
        let gi = g[i] + cfg.weight_decay * p[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        p[i] -= lr * mh / (vh.sqrt() + cfg.epsilon);
    }
}

/// Learning rate for each parameter group.
#[derive(Debug, Clone, PartialEq)]
pub enum LrPlan {
    Uniform(f64),
    PerGroup(BTreeMap<String, f64>),
}

impl LrPlan {
    pub fn for_group(&self, group: &str) -> Result<f64> {
        match self {
            LrPlan::Uniform(v) => Ok(*v),
            LrPlan::PerGroup(m) => m.get(group).copied().ok_or_else(|| Error::InvalidArgument(format!("no learning rate for group `{group}`"))),
        }
    }

    /// Largest rate in the plan.
    pub fn max(&self) -> f64 {
        match self {
            LrPlan::Uniform(v) => *v,
            LrPlan::PerGroup(m) => m.values().copied().fold(f64::MIN, f64::max),
        }
    }

    /// Every rate multiplied by `s`.
    pub fn scaled(&self, s: f64) -> LrPlan {
        match self {
            LrPlan::Uniform(v) => LrPlan::Uniform(v * s),
            LrPlan::PerGroup(m) => LrPlan::PerGroup(m.iter().map(|(k, v)| (k.clone(), v * s)).collect()),
        }
    }
}

impl LayerwiseLrs {
    /// Maps onto the text encoder's groups `embedding`, `layer.l`, `head`.
    pub fn to_plan(&self) -> LrPlan {
        let mut m = BTreeMap::new();
        m.insert("embedding".to_string(), self.embedding);
        for (i, &v) in self.layers.iter().enumerate() {
            m.insert(crate::model::TextEncoderSpec::layer_group(i + 1), v);
        }
        m.insert("head".to_string(), self.head);
        LrPlan::PerGroup(m)
    }
}

/// Optimizer state for one parameter store.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, num_values: usize) -> Result<Self> {
        cfg.validate()?;
        let v = match cfg {
            OptimizerConfig::Sgd(_) => Vec::new(),
            OptimizerConfig::Adam(_) => vec![0.0; num_values],
        };
        Ok(Self { cfg, m: vec![0.0; num_values], v, t: 0 })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update from the flat gradient `grads`. Frozen parameters
    /// and their state are left untouched.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[T], lrs: &LrPlan) -> Result<()> {
        let total = store.count();
        if grads.len() != total || self.m.len() != total {
            return shape_err(format!("{} gradients for {} parameters", grads.len(), total));
        }
        let mut off = 0;
        for p in store.iter() {
            let n = p.value.numel();
            if p.trainable && grads[off..off + n].iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
            off += n;
        }
        self.t += 1;
        let mut off = 0;
        let mut pbuf = Vec::new();
        let mut gbuf = Vec::new();
        for p in store.iter_mut() {
            let n = p.value.numel();
            let range = off..off + n;
            off += n;
            if !p.trainable {
                continue;
            }
            let lr = lrs.for_group(&p.group)?;
            pbuf.clear();
            pbuf.extend(p.value.data().iter().map(|v| v.as_f64()));
            gbuf.clear();
            gbuf.extend(grads[range.clone()].iter().map(|v| v.as_f64()));
            match &self.cfg {
                OptimizerConfig::Sgd(c) => sgd_update(&mut pbuf, &gbuf, &mut self.m[range], lr, c),
                OptimizerConfig::Adam(c) => {
                    adam_update(&mut pbuf, &gbuf, &mut self.m[range.clone()], &mut self.v[range], lr, self.t, c)
                }
            }
            for (d, &s) in p.value.data_mut().iter_mut().zip(&pbuf) {
                *d = T::from_f64(s);
            }
        }
        Ok(())
    }
}

/// Leaves only the parameters of `keep_trainable` groups trainable.
pub fn freeze<T: Scalar>(store: &mut ParamStore<T>, keep_trainable: &[&str]) -> Result<()> {
    store.train_only(keep_trainable)
}

#[cfg(test)]
mod tests;
