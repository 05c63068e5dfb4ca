//! Slice-level forward and backward kernels used by the graph ops.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// No padding: `L' = (L - F) / s + 1`, i.e. `L - F + 1` at stride 1.
    Valid,
    /// Zero padding chosen so that `L' = ceil(L / s)`; the extra row or
    /// column for odd totals goes to the bottom/right.
    Same,
}

/// Spatial geometry of a square-kernel convolution or pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn axis_geom(len: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if kernel > len {
                return shape_err(format!("kernel {kernel} larger than extent {len} (valid padding)"));
            }
            Ok(((len - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(len);
            if kernel > len + total {
                return shape_err(format!("kernel {kernel} larger than padded extent {}", len + total));
            }
            Ok((out, total / 2))
        }
    }
}

impl ConvGeom {
    pub fn new(in_h: usize, in_w: usize, kernel: usize, stride: usize, padding: Padding) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return shape_err(format!("kernel ({kernel}) and stride ({stride}) must be positive"));
        }
        if in_h == 0 || in_w == 0 {
            return shape_err("zero spatial extent");
        }
        let (out_h, pad_top) = axis_geom(in_h, kernel, stride, padding)?;
        let (out_w, pad_left) = axis_geom(in_w, kernel, stride, padding)?;
        Ok(Self {
            kernel,
            stride,
            pad_top,
            pad_left,
            in_h,
            in_w,
            out_h,
            out_w,
        })
    }
}

/// Output positions `o` in `[lo, hi)` whose input index `o*stride + offset`
/// lies inside `[0, in_len)`.
#[inline]
fn out_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Visits every (output, input) pixel pair of one plane, row segment at a time.
#[inline]
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let f_k = g.kernel;
    for fy in 0..f_k {
        let (oy_lo, oy_hi) = out_range(g.out_h, g.in_h, g.stride, fy as isize - g.pad_top as isize);
        for fx in 0..f_k {
            let (ox_lo, ox_hi) =
                out_range(g.out_w, g.in_w, g.stride, fx as isize - g.pad_left as isize);
            if ox_lo >= ox_hi {
                continue;
            }
            for oy in oy_lo..oy_hi {
                let iy = oy * g.stride + fy - g.pad_top;
                // tap index, out row, in row, out x range
                f(fy * f_k + fx, oy, iy, ox_lo, ox_hi);
            }
        }
    }
}

#[inline]
fn in_x(g: &ConvGeom, ox: usize, tap: usize) -> usize {
    ox * g.stride + tap % g.kernel - g.pad_left
}

/// `out += correlate(inp, w)` for a single input/output plane pair.
pub fn plane_forward<T: Scalar>(out: &mut [T], inp: &[T], w: &[T], g: &ConvGeom) {
    for_each_tap(g, |tap, oy, iy, lo, hi| {
        let wv = w[tap];
        let out_row = &mut out[oy * g.out_w..(oy + 1) * g.out_w];
        let in_row = &inp[iy * g.in_w..(iy + 1) * g.in_w];
        if g.stride == 1 {
            let ix0 = in_x(g, lo, tap);
            for (o, &i) in out_row[lo..hi].iter_mut().zip(&in_row[ix0..]) {
                *o = *o + wv * i;
            }
        } else {
            for ox in lo..hi {
                out_row[ox] = out_row[ox] + wv * in_row[in_x(g, ox, tap)];
            }
        }
    });
}

/// Accumulates the input gradient of one plane pair.
pub fn plane_grad_input<T: Scalar>(gin: &mut [T], gout: &[T], w: &[T], g: &ConvGeom) {
    for_each_tap(g, |tap, oy, iy, lo, hi| {
        let wv = w[tap];
        let gout_row = &gout[oy * g.out_w..(oy + 1) * g.out_w];
        let gin_row = &mut gin[iy * g.in_w..(iy + 1) * g.in_w];
        for ox in lo..hi {
            let ix = in_x(g, ox, tap);
            gin_row[ix] = gin_row[ix] + wv * gout_row[ox];
        }
    });
}

/// Accumulates the filter gradient of one plane pair.
pub fn plane_grad_weight<T: Scalar>(gw: &mut [T], gout: &[T], inp: &[T], g: &ConvGeom) {
    for_each_tap(g, |tap, oy, iy, lo, hi| {
        let gout_row = &gout[oy * g.out_w..(oy + 1) * g.out_w];
        let in_row = &inp[iy * g.in_w..(iy + 1) * g.in_w];
        let mut acc = T::zero();
        for ox in lo..hi {
            acc = acc + gout_row[ox] * in_row[in_x(g, ox, tap)];
        }
        gw[tap] = gw[tap] + acc;
    });
}

/// Full convolution. `x` is `[n, c, h, w]`, `w` is `[k, c, f, f]`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    (n, c, k): (usize, usize, usize),
    g: &ConvGeom,
) -> Vec<T> {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let w_plane = g.kernel * g.kernel;
    let mut out = vec![T::zero(); n * k * out_plane];
    for b in 0..n {
        for oc in 0..k {
            let o = &mut out[(b * k + oc) * out_plane..(b * k + oc + 1) * out_plane];
            if let Some(bias) = bias {
                o.fill(bias[oc]);
            }
            for ic in 0..c {
                let xi = &x[(b * c + ic) * in_plane..(b * c + ic + 1) * in_plane];
                let wi = &w[(oc * c + ic) * w_plane..(oc * c + ic + 1) * w_plane];
                plane_forward(o, xi, wi, g);
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_bias)`, each only when requested.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward<T: Scalar>(
    gout: &[T],
    x: &[T],
    w: &[T],
    (n, c, k): (usize, usize, usize),
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let w_plane = g.kernel * g.kernel;
    let mut gx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut gw = need.1.then(|| vec![T::zero(); w.len()]);
    let mut gb = need.2.then(|| vec![T::zero(); k]);
    for b in 0..n {
        for oc in 0..k {
            let go = &gout[(b * k + oc) * out_plane..(b * k + oc + 1) * out_plane];
            if let Some(gb) = gb.as_mut() {
                gb[oc] = gb[oc] + go.iter().copied().sum::<T>();
            }
            for ic in 0..c {
                let wr = (oc * c + ic) * w_plane..(oc * c + ic + 1) * w_plane;
                let xr = (b * c + ic) * in_plane..(b * c + ic + 1) * in_plane;
                if let Some(gx) = gx.as_mut() {
                    plane_grad_input(&mut gx[xr.clone()], go, &w[wr.clone()], g);
                }
                if let Some(gw) = gw.as_mut() {
                    plane_grad_weight(&mut gw[wr], go, &x[xr], g);
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Per-channel convolution. `x` is `[n, c, h, w]`, `w` is `[c, 1, f, f]`.
pub fn depthwise_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    (n, c): (usize, usize),
    g: &ConvGeom,
) -> Vec<T> {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let w_plane = g.kernel * g.kernel;
    let mut out = vec![T::zero(); n * c * out_plane];
    for b in 0..n {
        for ch in 0..c {
            let o = &mut out[(b * c + ch) * out_plane..(b * c + ch + 1) * out_plane];
            if let Some(bias) = bias {
                o.fill(bias[ch]);
            }
            plane_forward(
                o,
                &x[(b * c + ch) * in_plane..(b * c + ch + 1) * in_plane],
                &w[ch * w_plane..(ch + 1) * w_plane],
                g,
            );
        }
    }
    out
}

#[allow(clippy::type_complexity)]
pub fn depthwise_backward<T: Scalar>(
    gout: &[T],
    x: &[T],
    w: &[T],
    (n, c): (usize, usize),
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let w_plane = g.kernel * g.kernel;
    let mut gx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut gw = need.1.then(|| vec![T::zero(); w.len()]);
    let mut gb = need.2.then(|| vec![T::zero(); c]);
    for b in 0..n {
        for ch in 0..c {
            let go = &gout[(b * c + ch) * out_plane..(b * c + ch + 1) * out_plane];
            let xr = (b * c + ch) * in_plane..(b * c + ch + 1) * in_plane;
            let wr = ch * w_plane..(ch + 1) * w_plane;
            if let Some(gb) = gb.as_mut() {
                gb[ch] = gb[ch] + go.iter().copied().sum::<T>();
            }
            if let Some(gx) = gx.as_mut() {
                plane_grad_input(&mut gx[xr.clone()], go, &w[wr.clone()], g);
            }
            if let Some(gw) = gw.as_mut() {
                plane_grad_weight(&mut gw[wr], go, &x[xr], g);
            }
        }
    }
    (gx, gw, gb)
}

/// Max pooling over `pool x pool` windows; returns values and the flat input
/// index of each window's first maximum in row-major scan order.
pub fn maxpool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    g: &ConvGeom,
) -> (Vec<T>, Vec<usize>) {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let mut out = Vec::with_capacity(planes * out_plane);
    let mut arg = Vec::with_capacity(planes * out_plane);
    for p in 0..planes {
        let base = p * in_plane;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = T::neg_infinity();
                let mut best_i = base;
                let mut first = true;
                for py in 0..g.kernel {
                    for px in 0..g.kernel {
                        let idx = base + (oy * g.stride + py) * g.in_w + ox * g.stride + px;
                        if first || x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                            first = false;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

/// `c[m,n] = a[m,k] b[k,n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_acc(&mut out, a, b, m, k, n);
    out
}

fn matmul_acc<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `g b^T`, the gradient of `a b` with respect to `a`.
pub fn matmul_grad_a<T: Scalar>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let br = &b[p * n..(p + 1) * n];
            out[i * k + p] = gr.iter().zip(br).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `a^T g`, the gradient of `a b` with respect to `b`.
pub fn matmul_grad_b<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(gr) {
                *o = *o + av * gv;
            }
        }
    }
    out
}

/// Numerically stable softmax over rows of length `cols`.
pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Zero-mean, unit-variance normalization of each row; returns the normalized
/// values and the per-row inverse standard deviation.
pub fn normalize_rows<T: Scalar>(x: &[T], cols: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let nf = T::from_f64(cols as f64);
    let mut out = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(x.len() / cols);
    for row in x.chunks_exact(cols) {
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let is = (var + eps).sqrt().recip();
        inv.push(is);
        out.extend(row.iter().map(|&v| (v - mean) * is));
    }
    (out, inv)
}

/// Shape broadcast of two tensors (numpy rules, right-aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// For each element of `out_shape`, the flat offset of the broadcast source
/// element in a tensor of shape `src`.
pub fn broadcast_offsets(out_shape: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        let oi = i + rank - src.len();
        strides[oi] = if src[i] == 1 { 0 } else { s };
        s *= src[i];
    }
    let total: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

/// Axis permutation: `out.shape[i] = shape[perm[i]]`.
pub fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..x.len() {
        out.push(x[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_rules() {
        let g = ConvGeom::new(384, 384, 3, 1, Padding::Valid).unwrap();
        assert_eq!((g.out_h, g.out_w), (382, 382));
        let g = ConvGeom::new(224, 224, 3, 2, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.out_w, g.pad_top), (112, 112, 0));
        let g = ConvGeom::new(5, 5, 3, 1, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.pad_top), (5, 1));
        assert!(ConvGeom::new(2, 5, 3, 1, Padding::Valid).is_err());
    }

    #[test]
    fn out_range_respects_bounds() {
        // in 5, stride 2, offset -1 (pad 1): o=0 -> -1 (out), o=1 -> 1, o=2 -> 3
        assert_eq!(out_range(3, 5, 2, -1), (1, 3));
        assert_eq!(out_range(3, 5, 1, 2), (0, 3));
        assert_eq!(out_range(3, 2, 1, 2), (0, 0));
    }

    #[test]
    fn broadcast_offsets_channel_vector() {
        let offs = broadcast_offsets(&[2, 3, 2], &[1, 3, 1]);
        assert_eq!(offs, vec![0, 0, 1, 1, 2, 2, 0, 0, 1, 1, 2, 2]);
        assert!(broadcast_shape(&[2, 3], &[3, 2]).is_err());
        assert_eq!(broadcast_shape(&[4, 1, 3], &[5, 1]).unwrap(), vec![4, 5, 3]);
    }

    #[test]
    fn permute_transposes() {
        let x: Vec<f64> = (0..6).map(|v| v as f64).collect();
        assert_eq!(permute(&x, &[2, 3], &[1, 0]), vec![0., 3., 1., 4., 2., 5.]);
    }
}
