//! Layers composed purely from primitive graph ops.

use super::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{c, Scalar, Tensor};

/// Projection weights of one self-attention layer; each `w*` is
/// `[hidden, hidden]` and each `b*` is `[hidden]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl<T: Scalar> Graph<T> {
    fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize, transpose: bool) -> Result<Var> {
        let hidden = self.shape(x)[1];
        let dh = hidden / heads;
        let x = self.reshape(x, &[batch, seq, heads, dh])?;
        if transpose {
            // [b, heads, dh, seq]
            let x = self.permute(x, &[0, 2, 3, 1])?;
            self.reshape(x, &[batch * heads, dh, seq])
        } else {
            let x = self.permute(x, &[0, 2, 1, 3])?;
            self.reshape(x, &[batch * heads, seq, dh])
        }
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `x` is `[batch * seq, hidden]` (row-major over batch then position).
    /// `key_mask`, when given, has `batch * seq` entries; `false` keys are
    /// excluded from every query's softmax.
    pub fn multi_head_self_attention(
        &mut self,
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        p: &AttentionParams,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (rows, hidden) = self.value(x).dims2()?;
        if rows != batch * seq {
            return shape_err(format!("attention input has {rows} rows, expected {batch}x{seq}"));
        }
        if heads == 0 || hidden % heads != 0 {
            return shape_err(format!("hidden {hidden} not divisible by {heads} heads"));
        }
        let dh = hidden / heads;
        let q = self.linear(x, p.wq, Some(p.bq))?;
        let k = self.linear(x, p.wk, Some(p.bk))?;
        let v = self.linear(x, p.wv, Some(p.bv))?;
        let q = self.split_heads(q, batch, seq, heads, false)?;
        let kt = self.split_heads(k, batch, seq, heads, true)?;
        let v = self.split_heads(v, batch, seq, heads, false)?;

        let scores = self.bmm(q, kt)?;
        let mut scores = self.scale(scores, c(1.0 / (dh as f64).sqrt()));
        if let Some(mask) = key_mask {
            if mask.len() != batch * seq {
                return shape_err(format!("key mask has {} entries, expected {}", mask.len(), batch * seq));
            }
            let bias: Vec<T> = mask.iter().map(|&m| if m { T::zero() } else { c(-1e9) }).collect();
            let bias = self.input(Tensor::new(&[batch, 1, 1, seq], bias)?);
            let s4 = self.reshape(scores, &[batch, heads, seq, seq])?;
            let s4 = self.add(s4, bias)?;
            scores = self.reshape(s4, &[batch * heads, seq, seq])?;
        }
        let attn = self.softmax(scores);
        let ctx = self.bmm(attn, v)?;
        let ctx = self.reshape(ctx, &[batch, heads, seq, dh])?;
        let ctx = self.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.reshape(ctx, &[batch * seq, hidden])?;
        self.linear(ctx, p.wo, Some(p.bo))
    }
}
