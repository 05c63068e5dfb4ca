//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every op appends a node whose inputs are earlier
//! nodes, so insertion order is a topological order. [`Graph::backward`]
//! walks the tape once in reverse and accumulates gradients additively, so a
//! value consumed twice receives the sum of both paths.

mod composite;
pub mod kernels;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use composite::AttentionParams;
pub use kernels::{ConvGeom, Padding};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{c, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { x: Var, axis: usize, start: usize },
    Relu(Var),
    Sigmoid(Var),
    Swish(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Depthwise { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Normalize { x: Var, inv_std: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Softmax(Var),
    SoftmaxCrossEntropy { logits: Var, probs: Vec<T>, labels: Vec<usize>, scale: T },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of tensor operations. Single-threaded by construction; build one
/// graph per forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shape(v), g.clone()).ok()
    }

    // ---- elementwise -------------------------------------------------

    fn binary_broadcast(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, bool)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        if sa == sb {
            let data = da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect();
            return Ok((Tensor::new(&sa, data)?, rg));
        }
        let out_shape = kernels::broadcast_shape(&sa, &sb)?;
        let oa = kernels::broadcast_offsets(&out_shape, &sa);
        let ob = kernels::broadcast_offsets(&out_shape, &sb);
        let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
        Ok((Tensor::new(&out_shape, data)?, rg))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary_broadcast(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary_broadcast(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let x = self.value(a);
        let t = Tensor::new(x.shape(), x.data().iter().map(|&v| v * s).collect()).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let x = self.value(a);
        let t = Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect()).unwrap();
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(T::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * sigmoid(v), Op::Swish(a))
    }

    // ---- shape -------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return invalid(format!("{perm:?} is not a permutation of {} axes", shape.len()));
        }
        let data = kernels::permute(self.value(a).data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let t = Tensor::new(&out_shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Permute(a, perm.to_vec()), rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return shape_err(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let t = Tensor::new(&out_shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Narrow { x: a, axis, start }, rg))
    }

    // ---- linear algebra ----------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return shape_err(format!("matmul inner dims {k} vs {k2}"));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(&[m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// Batched `[b, m, k] x [b, k, n] -> [b, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 {
            return shape_err(format!("bmm needs 3-d operands, got {sa:?} x {sb:?}"));
        }
        let (ba, m, k) = (sa[0], sa[1], sa[2]);
        let (bb, k2, n) = (sb[0], sb[1], sb[2]);
        if ba != bb || k != k2 {
            return shape_err(format!("bmm {sa:?} x {sb:?}"));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ba * m * n);
        for i in 0..ba {
            data.extend(kernels::matmul(
                &xa[i * m * k..(i + 1) * m * k],
                &xb[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let t = Tensor::new(&[ba, m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::BatchMatMul(a, b), rg))
    }

    /// `x w + b` for `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- convolution & pooling ---------------------------------------

    /// Cross-correlation of `x: [n, c, h, w]` with `w: [k, c, f, f]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (k, c2, f, f2) = self.value(w).dims4()?;
        if c != c2 || f != f2 {
            return shape_err(format!(
                "conv2d input {:?} incompatible with filters {:?}",
                self.shape(x),
                self.shape(w)
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [k] {
                return shape_err(format!("conv2d bias {:?}, expected [{k}]", self.shape(b)));
            }
        }
        let geom = ConvGeom::new(h, wd, f, stride, padding)?;
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            (n, c, k),
            &geom,
        );
        let t = Tensor::new(&[n, k, geom.out_h, geom.out_w], data)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Per-channel convolution of `x: [n, c, h, w]` with `w: [c, 1, f, f]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (c2, one, f, f2) = self.value(w).dims4()?;
        if c != c2 || one != 1 || f != f2 {
            return shape_err(format!(
                "depthwise filters {:?} do not match {c} input channels",
                self.shape(w)
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [c] {
                return shape_err(format!("depthwise bias {:?}, expected [{c}]", self.shape(b)));
            }
        }
        let geom = ConvGeom::new(h, wd, f, stride, padding)?;
        let data = kernels::depthwise_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            (n, c),
            &geom,
        );
        let t = Tensor::new(&[n, c, geom.out_h, geom.out_w], data)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Depthwise { x, w, b, geom }, rg))
    }

    /// Valid max pooling with `pool x pool` windows.
    pub fn maxpool(&mut self, x: Var, pool: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if pool > h || pool > w {
            return shape_err(format!("pool {pool} exceeds spatial extent {h}x{w}"));
        }
        let geom = ConvGeom::new(h, w, pool, stride, Padding::Valid)?;
        let (data, argmax) = kernels::maxpool_forward(self.value(x).data(), n * c, &geom);
        let t = Tensor::new(&[n, c, geom.out_h, geom.out_w], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MaxPool { x, argmax }, rg))
    }

    /// Mean over the spatial axes: `[n, c, h, w] -> [n, c, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let inv = c_inv::<T>(hw);
        let data = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let t = Tensor::new(&[n, c, 1, 1], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GlobalAvgPool(x), rg))
    }

    // ---- normalization & regularization --------------------------------

    /// Training-mode batch normalization over `(n, h, w)` per channel.
    /// Returns the output and the batch mean and (biased) variance.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, ch, h, w) = self.value(x).dims4()?;
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return shape_err(format!("batch_norm scale/shift must be [{ch}]"));
        }
        let hw = h * w;
        let m = c_inv::<T>(n * hw);
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![T::zero(); ch];
        let mut var = vec![T::zero(); ch];
        for b in 0..n {
            for k in 0..ch {
                let p = &xd[(b * ch + k) * hw..(b * ch + k + 1) * hw];
                mean[k] = mean[k] + p.iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|v| *v = *v * m);
        for b in 0..n {
            for k in 0..ch {
                let p = &xd[(b * ch + k) * hw..(b * ch + k + 1) * hw];
                var[k] = var[k] + p.iter().map(|&v| (v - mean[k]) * (v - mean[k])).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v = *v * m);
        let inv_std: Vec<T> = var.iter().map(|&v| (v + c(eps)).sqrt().recip()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for (i, (&v, (xh, o))) in xd.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let k = (i / hw) % ch;
            *xh = (v - mean[k]) * inv_std[k];
            *o = gd[k] * *xh + bd[k];
        }
        let t = Tensor::new(&[n, ch, h, w], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(t, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, rg);
        Ok((v, mean, var))
    }

    /// Zero-mean unit-variance normalization of each slice
    /// `x[i0, .., i_{axis-1}, :, .., :]` (no learnable parameters).
    pub fn normalize_from(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("normalize axis {axis} out of range for {shape:?}"));
        }
        let cols: usize = shape[axis..].iter().product();
        let (data, inv_std) = kernels::normalize_rows(self.value(x).data(), cols, c(eps));
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Normalize { x, inv_std }, rg))
    }

    /// Layer normalization over the last axis with learnable scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let last = self.shape(x).len() - 1;
        let y = self.normalize_from(x, last, eps)?;
        let y = self.mul(y, gamma)?;
        self.add(y, beta)
    }

    /// Inverted dropout. Row `i` (first axis) draws its keep mask from a
    /// generator seeded with `row_seeds[i]`, so masks depend only on the
    /// seeds and not on batch composition.
    pub fn dropout(&mut self, x: Var, rate: f64, row_seeds: &[u64]) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return invalid(format!("dropout rate {rate} outside [0, 1)"));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let shape = self.shape(x).to_vec();
        if row_seeds.len() != shape[0] {
            return shape_err(format!("{} dropout seeds for {} rows", row_seeds.len(), shape[0]));
        }
        let per_row = self.value(x).numel() / shape[0];
        let keep = c::<T>(1.0 / (1.0 - rate));
        let mut mask = Vec::with_capacity(per_row * shape[0]);
        for &seed in row_seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            mask.extend((0..per_row).map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            }));
        }
        let data = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    /// Row lookup: `table: [v, d]`, returns `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        if ids.is_empty() {
            return shape_err("embedding lookup with no ids");
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return invalid(format!("token id {bad} outside vocabulary of {v}"));
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    // ---- probabilities & losses ----------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap();
        let data = kernels::softmax_rows(self.value(x).data(), cols);
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, data).unwrap(), Op::Softmax(x), rg)
    }

    /// Cross-entropy of `softmax(logits)` against integer labels, reduced
    /// over the batch. Stabilized by max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let (n, classes) = self.value(logits).dims2()?;
        if labels.len() != n {
            return shape_err(format!("{} labels for batch of {n}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return invalid(format!("label {bad} out of range for {classes} classes"));
        }
        let x = self.value(logits).data();
        let probs = kernels::softmax_rows(x, classes);
        let mut loss = T::zero();
        for (row, &l) in x.chunks_exact(classes).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss = loss + (lse - row[l]);
        }
        let scale = match reduction {
            Reduction::Mean => c_inv::<T>(n),
            Reduction::Sum => T::one(),
        };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss * scale),
            Op::SoftmaxCrossEntropy { logits, probs, labels: labels.to_vec(), scale },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.value(x).data().iter().copied().sum::<T>() * c_inv::<T>(n);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    // ---- backward ------------------------------------------------------

    /// Propagates `d loss / d node` to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g)?;
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(contribution).for_each(|(a, b)| *a = *a + b),
            slot => *slot = Some(contribution),
        }
    }

    fn reduce_broadcast(&self, g: &[T], out_shape: &[usize], src: Var, factor: Option<Var>, other: Option<Var>) -> Vec<T> {
        let src_shape = self.shape(src);
        let mut acc = vec![T::zero(); self.value(src).numel()];
        let offs = kernels::broadcast_offsets(out_shape, src_shape);
        match (factor, other) {
            (Some(f), Some(o)) => {
                let fo = kernels::broadcast_offsets(out_shape, self.shape(o));
                let fd = self.value(f).data();
                for ((&gi, &si), &fi) in g.iter().zip(&offs).zip(&fo) {
                    acc[si] = acc[si] + gi * fd[fi];
                }
            }
            _ => {
                for (&gi, &si) in g.iter().zip(&offs) {
                    acc[si] = acc[si] + gi;
                }
            }
        }
        acc
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) -> Result<()> {
        let out_shape = self.nodes[i].value.shape().to_vec();
        // Collected first so the node borrow ends before accumulation.
        let mut contribs: Vec<(Var, Vec<T>)> = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(v) {
                        let gv = if self.shape(v) == out_shape.as_slice() {
                            g.to_vec()
                        } else {
                            self.reduce_broadcast(g, &out_shape, v, None, None)
                        };
                        contribs.push((v, gv));
                    }
                }
            }
            &Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.rg(v) {
                        let gv = if self.shape(v) == out_shape.as_slice() && self.shape(other) == out_shape.as_slice() {
                            g.iter().zip(self.value(other).data()).map(|(&x, &y)| x * y).collect()
                        } else {
                            self.reduce_broadcast(g, &out_shape, v, Some(other), Some(other))
                        };
                        contribs.push((v, gv));
                    }
                }
            }
            &Op::Scale(a, s) => contribs.push((a, g.iter().map(|&v| v * s).collect())),
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2()?;
                let n = self.value(b).dims2()?.1;
                if self.rg(a) {
                    contribs.push((a, kernels::matmul_grad_a(g, self.value(b).data(), m, k, n)));
                }
                if self.rg(b) {
                    contribs.push((b, kernels::matmul_grad_b(self.value(a).data(), g, m, k, n)));
                }
            }
            &Op::BatchMatMul(a, b) => {
                let (bs, m, k) = {
                    let s = self.shape(a);
                    (s[0], s[1], s[2])
                };
                let n = self.shape(b)[2];
                let (xa, xb) = (self.value(a).data(), self.value(b).data());
                if self.rg(a) {
                    let mut ga = Vec::with_capacity(xa.len());
                    for t in 0..bs {
                        ga.extend(kernels::matmul_grad_a(&g[t * m * n..(t + 1) * m * n], &xb[t * k * n..(t + 1) * k * n], m, k, n));
                    }
                    contribs.push((a, ga));
                }
                if self.rg(b) {
                    let mut gb = Vec::with_capacity(xb.len());
                    for t in 0..bs {
                        gb.extend(kernels::matmul_grad_b(&xa[t * m * k..(t + 1) * m * k], &g[t * m * n..(t + 1) * m * n], m, k, n));
                    }
                    contribs.push((b, gb));
                }
            }
            &Op::Reshape(a) => contribs.push((a, g.to_vec())),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                contribs.push((*a, kernels::permute(g, &out_shape, &inv)));
            }
            &Op::Narrow { x, axis, start } => {
                let in_shape = self.shape(x).to_vec();
                let len = out_shape[axis];
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let mut gx = vec![T::zero(); self.value(x).numel()];
                for o in 0..outer {
                    let dst = (o * in_shape[axis] + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                contribs.push((x, gx));
            }
            &Op::Relu(a) => {
                let x = self.value(a).data();
                contribs.push((a, g.iter().zip(x).map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() }).collect()));
            }
            &Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                contribs.push((a, g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect()));
            }
            &Op::Swish(a) => {
                let x = self.value(a).data();
                contribs.push((
                    a,
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| {
                            let s = sigmoid(xv);
                            gv * s * (T::one() + xv * (T::one() - s))
                        })
                        .collect(),
                ));
            }
            &Op::Conv2d { x, w, b, geom } => {
                let (n, ch, _, _) = self.value(x).dims4()?;
                let k = self.shape(w)[0];
                let need = (self.rg(x), self.rg(w), b.is_some_and(|b| self.rg(b)));
                let (gx, gw, gb) = kernels::conv2d_backward(g, self.value(x).data(), self.value(w).data(), (n, ch, k), &geom, need);
                push_opt(&mut contribs, x, gx);
                push_opt(&mut contribs, w, gw);
                if let Some(b) = b {
                    push_opt(&mut contribs, b, gb);
                }
            }
            &Op::Depthwise { x, w, b, geom } => {
                let (n, ch, _, _) = self.value(x).dims4()?;
                let need = (self.rg(x), self.rg(w), b.is_some_and(|b| self.rg(b)));
                let (gx, gw, gb) = kernels::depthwise_backward(g, self.value(x).data(), self.value(w).data(), (n, ch), &geom, need);
                push_opt(&mut contribs, x, gx);
                push_opt(&mut contribs, w, gw);
                if let Some(b) = b {
                    push_opt(&mut contribs, b, gb);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (&gv, &ai) in g.iter().zip(argmax) {
                    gx[ai] = gx[ai] + gv;
                }
                contribs.push((*x, gx));
            }
            &Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(x).dims4()?;
                let inv = c_inv::<T>(h * w);
                let mut gx = Vec::with_capacity(self.value(x).numel());
                for &gv in g {
                    gx.extend(std::iter::repeat_n(gv * inv, h * w));
                }
                contribs.push((x, gx));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, ch, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let mut sum_g = vec![T::zero(); ch];
                let mut sum_gx = vec![T::zero(); ch];
                for (idx, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                    let k = (idx / hw) % ch;
                    sum_g[k] = sum_g[k] + gv;
                    sum_gx[k] = sum_gx[k] + gv * xh;
                }
                if self.rg(*x) {
                    let gd = self.value(*gamma).data();
                    let m = c::<T>((n * hw) as f64);
                    let gx = g
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(idx, (&gv, &xh))| {
                            let k = (idx / hw) % ch;
                            gd[k] * inv_std[k] / m * (m * gv - sum_g[k] - xh * sum_gx[k])
                        })
                        .collect();
                    contribs.push((*x, gx));
                }
                contribs.push((*gamma, sum_gx));
                contribs.push((*beta, sum_g));
            }
            Op::Normalize { x, inv_std } => {
                let rows = inv_std.len();
                let cols = g.len() / rows;
                let nf = c::<T>(cols as f64);
                let y = self.nodes[i].value.data();
                let mut gx = Vec::with_capacity(g.len());
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let yr = &y[r * cols..(r + 1) * cols];
                    let mg = gr.iter().copied().sum::<T>() / nf;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    gx.extend(gr.iter().zip(yr).map(|(&gv, &yv)| inv_std[r] * (gv - mg - yv * mgy)));
                }
                contribs.push((*x, gx));
            }
            Op::Dropout { x, mask } => contribs.push((*x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect())),
            Op::Embedding { table, ids } => {
                let (_, d) = self.value(*table).dims2()?;
                let mut gt = vec![T::zero(); self.value(*table).numel()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] = gt[id * d + j] + g[row * d + j];
                    }
                }
                contribs.push((*table, gt));
            }
            &Op::Softmax(x) => {
                let y = self.nodes[i].value.data();
                let cols = *out_shape.last().unwrap();
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks_exact(cols).zip(y.chunks_exact(cols)) {
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    gx.extend(gr.iter().zip(yr).map(|(&gv, &yv)| yv * (gv - dot)));
                }
                contribs.push((x, gx));
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels, scale } => {
                let classes = probs.len() / labels.len();
                let s = g[0] * *scale;
                let mut gl: Vec<T> = probs.iter().map(|&p| p * s).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * classes + l] = gl[r * classes + l] - s;
                }
                contribs.push((*logits, gl));
            }
            &Op::Sum(x) => contribs.push((x, vec![g[0]; self.value(x).numel()])),
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                contribs.push((x, vec![g[0] * c_inv::<T>(n); n]));
            }
        }
        for (v, gv) in contribs {
            self.accumulate(v, gv);
        }
        Ok(())
    }
}

fn push_opt<T>(contribs: &mut Vec<(Var, Vec<T>)>, v: Var, g: Option<Vec<T>>) {
    if let Some(g) = g {
        contribs.push((v, g));
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        (T::one() + (-v).exp()).recip()
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn c_inv<T: Scalar>(n: usize) -> T {
    T::from_f64(1.0 / n as f64)
}
