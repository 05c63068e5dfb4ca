//! Learning-rate rules: linear batch scaling, STLR and layer-wise decay.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// `base * n * k / 256`.
pub fn reference_lr(base: f64, n: usize, k: usize) -> Result<f64> {
    if n == 0 || k == 0 {
        return invalid("per-worker batch and worker count must be >= 1");
    }
    Ok(base * (n * k) as f64 / 256.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StlrConfig {
    pub eta_max: f64,
    pub total_steps: usize,
    #[serde(default = "default_cut_frac")]
    pub cut_frac: f64,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
}

fn default_cut_frac() -> f64 {
    0.1
}

fn default_ratio() -> f64 {
    32.0
}

impl StlrConfig {
    pub fn new(eta_max: f64, total_steps: usize) -> Self {
        Self { eta_max, total_steps, cut_frac: default_cut_frac(), ratio: default_ratio() }
    }

    pub fn cut(&self) -> usize {
        (self.total_steps as f64 * self.cut_frac).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_max > 0.0) {
            return invalid(format!("eta_max {} must be positive", self.eta_max));
        }
        if !(self.cut_frac > 0.0 && self.cut_frac < 1.0) {
            return invalid(format!("cut_frac {} outside (0, 1)", self.cut_frac));
        }
        if !(self.ratio > 1.0) {
            return invalid(format!("ratio {} must exceed 1", self.ratio));
        }
        let cut = self.cut();
        if cut < 1 || cut >= self.total_steps {
            return invalid(format!("cut = floor({} * {}) must lie in [1, T)", self.total_steps, self.cut_frac));
        }
        Ok(())
    }
}

/// Slanted triangular rate at step `t` in `[0, T]`.
///
/// Rises linearly from `eta_max / ratio` to `eta_max` at `cut`, then falls
/// linearly back to `eta_max / ratio` at `T`.
pub fn stlr_lr(t: usize, cfg: &StlrConfig) -> Result<f64> {
    cfg.validate()?;
    if t > cfg.total_steps {
        return invalid(format!("step {t} beyond total {}", cfg.total_steps));
    }
    let cut = cfg.cut();
    let p = if t < cut {
        t as f64 / cut as f64
    } else {
        1.0 - (t - cut) as f64 / (cfg.total_steps - cut) as f64
    };
    Ok(cfg.eta_max * (1.0 + p * (cfg.ratio - 1.0)) / cfg.ratio)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseDecayConfig {
    #[serde(default = "default_eta_top")]
    pub eta_top: f64,
    #[serde(default = "default_eta_body")]
    pub eta_body: f64,
    #[serde(default = "default_xi")]
    pub xi: f64,
}

fn default_eta_top() -> f64 {
    1e-6
}

fn default_eta_body() -> f64 {
    3e-5
}

fn default_xi() -> f64 {
    0.95
}

impl Default for LayerwiseDecayConfig {
    fn default() -> Self {
        Self { eta_top: default_eta_top(), eta_body: default_eta_body(), xi: default_xi() }
    }
}

/// Rates below this are reported as vanishing.
pub const LR_UNDERFLOW: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseLrs {
    pub embedding: f64,
    /// Encoder layers 1..=L, bottom-up.
    pub layers: Vec<f64>,
    pub head: f64,
}

impl LayerwiseLrs {
    pub fn any_vanishing(&self) -> bool {
        self.layers.iter().chain([&self.embedding, &self.head]).any(|&v| v < LR_UNDERFLOW)
    }
}

/// Head gets `eta_top`; layer `l` (counted from the top, 0-based) gets
/// `eta_body * xi^l`; the embedding shares the deepest layer's rate.
pub fn layerwise_lrs(cfg: &LayerwiseDecayConfig, num_layers: usize) -> Result<LayerwiseLrs> {
    if num_layers == 0 {
        return invalid("need at least one encoder layer");
    }
    if !(cfg.xi > 0.0) || !(cfg.eta_body > 0.0) || !(cfg.eta_top > 0.0) {
        return invalid("xi and learning rates must be positive");
    }
    let mut layers = Vec::with_capacity(num_layers);
    let mut v = cfg.eta_body;
    for _ in 0..num_layers {
        layers.push(v);
        v *= cfg.xi;
    }
    layers.reverse();
    let out = LayerwiseLrs { embedding: layers[0], layers, head: cfg.eta_top };
    if out.any_vanishing() {
        log::warn!(
            "layer-wise decay xi = {} drives learning rates down to {:e}; lower layers will effectively not train",
            cfg.xi,
            out.embedding
        );
    }
    Ok(out)
}
