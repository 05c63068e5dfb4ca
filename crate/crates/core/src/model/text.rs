//! Reduced BERT-style encoder with a classification head on `[CLS]`.

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::{Classifier, ForwardCtx};
use crate::autodiff::{AttentionParams, Graph, Var};
use crate::error::{invalid, shape_err, Result};
use crate::rng::rng_for;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Swish,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderSpec {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_classes: usize,
    pub dropout: f64,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
}

fn default_ffn_mult() -> usize {
    4
}

impl TextEncoderSpec {
    pub fn full(num_classes: usize) -> Self {
        Self {
            num_layers: 6,
            hidden: 768,
            heads: 12,
            vocab_size: 30522,
            max_len: 512,
            num_classes,
            dropout: 0.2,
            activation: Activation::Swish,
            ffn_mult: 4,
        }
    }

    pub fn desk(num_classes: usize) -> Self {
        Self {
            num_layers: 2,
            hidden: 64,
            heads: 4,
            vocab_size: 128,
            max_len: 32,
            num_classes,
            dropout: 0.1,
            activation: Activation::Swish,
            ffn_mult: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            return shape_err(format!("hidden {} not divisible by {} heads", self.hidden, self.heads));
        }
        if self.max_len < 2 {
            return invalid("max_len must leave room for [CLS] and [SEP]");
        }
        if self.num_layers == 0 || self.vocab_size == 0 || self.num_classes == 0 || self.ffn_mult == 0 {
            return invalid("layers, vocabulary, classes and ffn_mult must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Name of the parameter group of encoder layer `l` (1-based).
    pub fn layer_group(l: usize) -> String {
        format!("layer.{l}")
    }
}

/// Token ids with `[CLS]` first, padded to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedText {
    pub ids: Vec<u32>,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    attn: [ParamId; 8],
    ln1: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct TextModel<T> {
    pub spec: TextEncoderSpec,
    store: ParamStore<T>,
    tok: ParamId,
    pos: ParamId,
    ln: (ParamId, ParamId),
    blocks: Vec<Block>,
    head: (ParamId, ParamId),
}

const LN_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;

pub fn build_text_encoder<T: Scalar>(spec: &TextEncoderSpec, seed: u64) -> Result<TextModel<T>> {
    spec.validate()?;
    let mut rng = rng_for(seed, &[0x7E47]);
    let mut s = ParamStore::new();
    let h = spec.hidden;
    let mut normal = |s: &mut ParamStore<T>, name: String, group: &str, shape: &[usize]| {
        s.add(name, group, Tensor::randn(shape, INIT_STD, &mut rng).unwrap())
    };
    let zeros = |s: &mut ParamStore<T>, name: String, group: &str, n: usize| s.add(name, group, Tensor::zeros(&[n]).unwrap());
    let ln = |s: &mut ParamStore<T>, prefix: &str, group: &str| {
        (
            s.add(format!("{prefix}.gamma"), group, Tensor::ones(&[h]).unwrap()),
            s.add(format!("{prefix}.beta"), group, Tensor::zeros(&[h]).unwrap()),
        )
    };

    let tok = normal(&mut s, "embedding.token".into(), "embedding", &[spec.vocab_size, h]);
    let pos = normal(&mut s, "embedding.position".into(), "embedding", &[spec.max_len, h]);
    let emb_ln = ln(&mut s, "embedding.norm", "embedding");
    let mut blocks = Vec::with_capacity(spec.num_layers);
    for l in 1..=spec.num_layers {
        let g = TextEncoderSpec::layer_group(l);
        let p = format!("layer.{l}");
        let mut attn = Vec::with_capacity(8);
        for m in ["query", "key", "value", "output"] {
            attn.push(normal(&mut s, format!("{p}.attention.{m}.weight"), &g, &[h, h]));
            attn.push(zeros(&mut s, format!("{p}.attention.{m}.bias"), &g, h));
        }
        let ln1 = ln(&mut s, &format!("{p}.attention.norm"), &g);
        let inner = h * spec.ffn_mult;
        let ff1 = (
            normal(&mut s, format!("{p}.ffn.in.weight"), &g, &[h, inner]),
            zeros(&mut s, format!("{p}.ffn.in.bias"), &g, inner),
        );
        let ff2 = (
            normal(&mut s, format!("{p}.ffn.out.weight"), &g, &[inner, h]),
            zeros(&mut s, format!("{p}.ffn.out.bias"), &g, h),
        );
        let ln2 = ln(&mut s, &format!("{p}.ffn.norm"), &g);
        blocks.push(Block { attn: attn.try_into().unwrap(), ln1, ff1, ff2, ln2 });
    }
    let head = (
        normal(&mut s, "head.fc.weight".into(), "head", &[h, spec.num_classes]),
        zeros(&mut s, "head.fc.bias".into(), "head", spec.num_classes),
    );
    Ok(TextModel { spec: spec.clone(), store: s, tok, pos, ln: emb_ln, blocks, head })
}

impl<T: Scalar> TextModel<T> {
    pub fn count_params(&self) -> usize {
        self.store.count()
    }

    /// Group names from the input side up: embedding, layer.1 .. layer.L, head.
    pub fn group_order(&self) -> Vec<String> {
        let mut g = vec!["embedding".to_string()];
        g.extend((1..=self.spec.num_layers).map(TextEncoderSpec::layer_group));
        g.push("head".into());
        g
    }

    pub fn from_parts(spec: TextEncoderSpec, store: ParamStore<T>) -> Result<Self> {
        let mut m = build_text_encoder::<T>(&spec, 0)?;
        if m.store.len() != store.len() {
            return shape_err("parameter list does not match the encoder spec");
        }
        for (a, b) in m.store.iter().zip(store.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return shape_err(format!("parameter `{}` {:?} does not match `{}` {:?}", b.name, b.value.shape(), a.name, a.value.shape()));
            }
        }
        m.store = store;
        Ok(m)
    }
}

impl<T: Scalar> Classifier<T> for TextModel<T> {
    type Input = EncodedText;

    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn logits(&self, g: &mut Graph<T>, p: &[Var], batch: &[&EncodedText], ctx: &ForwardCtx) -> Result<Var> {
        let n = batch.len();
        let seq = batch.first().map(|e| e.ids.len()).unwrap_or(0);
        if n == 0 || seq == 0 || seq > self.spec.max_len {
            return shape_err(format!("text batch of {n} sequences of length {seq} (max {})", self.spec.max_len));
        }
        let mut ids = Vec::with_capacity(n * seq);
        let mut mask = Vec::with_capacity(n * seq);
        for e in batch {
            if e.ids.len() != seq || e.mask.len() != seq {
                return shape_err("sequences in a batch must share one length");
            }
            ids.extend(e.ids.iter().map(|&i| i as usize));
            mask.extend_from_slice(&e.mask);
        }
        let h = self.spec.hidden;
        let rate = ctx.dropout_rate(self.spec.dropout);
        let mut site = 0u64;
        let mut drop = |g: &mut Graph<T>, x: Var, rows: usize| -> Result<Var> {
            site += 1;
            if rate > 0.0 {
                g.dropout(x, rate, &ctx.row_seeds(site, rows))
            } else {
                Ok(x)
            }
        };

        let tok = g.embedding(p[self.tok.index()], &ids)?;
        let tok = g.reshape(tok, &[n, seq, h])?;
        let pos = g.narrow(p[self.pos.index()], 0, 0, seq)?;
        let x = g.add(tok, pos)?;
        let x = g.reshape(x, &[n * seq, h])?;
        let x = g.layer_norm(x, p[self.ln.0.index()], p[self.ln.1.index()], LN_EPS)?;
        let mut x = drop(g, x, seq)?;

        for b in &self.blocks {
            let a = b.attn.map(|id| p[id.index()]);
            let ap = AttentionParams { wq: a[0], bq: a[1], wk: a[2], bk: a[3], wv: a[4], bv: a[5], wo: a[6], bo: a[7] };
            let att = g.multi_head_self_attention(x, n, seq, self.spec.heads, &ap, Some(&mask))?;
            let att = drop(g, att, seq)?;
            let y = g.add(x, att)?;
            x = g.layer_norm(y, p[b.ln1.0.index()], p[b.ln1.1.index()], LN_EPS)?;
            let f = g.linear(x, p[b.ff1.0.index()], Some(p[b.ff1.1.index()]))?;
            let f = match self.spec.activation {
                Activation::Swish => g.swish(f),
                Activation::Relu => g.relu(f),
            };
            let f = g.linear(f, p[b.ff2.0.index()], Some(p[b.ff2.1.index()]))?;
            let f = drop(g, f, seq)?;
            let y = g.add(x, f)?;
            x = g.layer_norm(y, p[b.ln2.0.index()], p[b.ln2.1.index()], LN_EPS)?;
        }

        let x = g.reshape(x, &[n, seq, h])?;
        let cls = g.narrow(x, 1, 0, 1)?;
        let cls = g.reshape(cls, &[n, h])?;
        let cls = drop(g, cls, 1)?;
        g.linear(cls, p[self.head.0.index()], Some(p[self.head.1.index()]))
    }
}
