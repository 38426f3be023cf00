//! Forward and backward kernels for the primitives the network is built from.
//!
//! Every kernel here is a plain function over tensors; [`crate::autograd`]
//! records which kernel produced each node and calls the matching backward
//! kernel. Convolution reductions accumulate in `f64` and every output element
//! is produced by exactly one task, so results do not depend on the worker
//! thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Weights `(out, in, kh, kw)` plus one bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    weights: Tensor,
    bias: Vec<f32>,
}

impl ConvKernel {
    pub fn new(weights: Tensor, bias: Vec<f32>) -> Result<Self> {
        if weights.shape().rank() != 4 {
            return Err(Error::Config(format!(
                "kernel weights must be rank 4 (out, in, kh, kw), got {}",
                weights.shape()
            )));
        }
        let [out, _, kh, kw] = weights.dims4();
        check_odd(kh, kw)?;
        if bias.len() != out {
            return Err(Error::Config(format!("bias has {} entries for {out} output channels", bias.len())));
        }
        Ok(ConvKernel { weights, bias })
    }

    pub fn zeros(out: usize, inp: usize, kh: usize, kw: usize) -> Result<Self> {
        check_odd(kh, kw)?;
        ConvKernel::new(Tensor::zeros(Shape::nchw(out, inp, kh, kw)?), vec![0.0; out])
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dims4()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dims4()[1]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        let [_, _, kh, kw] = self.weights.dims4();
        (kh, kw)
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f32] {
        self.weights.values_mut()
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f32] {
        &mut self.bias
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

fn check_odd(kh: usize, kw: usize) -> Result<()> {
    if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
        return Err(Error::Config(format!("kernel extents must be odd for same padding, got {kh}×{kw}")));
    }
    Ok(())
}

/// Zero-padded "same" convolution (cross-correlation), stride 1.
pub fn conv2d_same(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    let dims = input.dims4();
    let wdims = kernel.weights.dims4();
    check_conv_shapes(dims, wdims)?;
    let out = conv_forward(input.values(), dims, kernel.weights.values(), wdims, &kernel.bias);
    Tensor::new(&[dims[0], wdims[0], dims[2], dims[3]], out)
}

pub(crate) fn check_conv_shapes(dims: [usize; 4], wdims: [usize; 4]) -> Result<()> {
    check_odd(wdims[2], wdims[3])?;
    if dims[1] != wdims[1] {
        return Err(Error::Config(format!("convolution expects {} input channels, got {}", wdims[1], dims[1])));
    }
    Ok(())
}

/// Output rows (or columns) `[lo, hi)` whose source index `i + shift` lies in `[0, len)`.
#[inline]
fn valid_range(len: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// `dst[y, x] += scale * src[y + sy, x + sx]` over in-range source pixels.
#[inline]
fn accumulate_shifted(dst: &mut [f64], src: &[f32], h: usize, w: usize, sy: isize, sx: isize, scale: f64) {
    let (y0, y1) = valid_range(h, sy);
    let (x0, x1) = valid_range(w, sx);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy_row = (y as isize + sy) as usize * w;
        let src_row = &src[(sy_row as isize + x0 as isize + sx) as usize..][..x1 - x0];
        let dst_row = &mut dst[y * w + x0..y * w + x1];
        for (d, &s) in dst_row.iter_mut().zip(src_row) {
            *d += scale * s as f64;
        }
    }
}

/// `Σ a[y, x] * b[y + sy, x + sx]` over in-range pixels of `b`.
#[inline]
fn shifted_dot(a: &[f32], b: &[f32], h: usize, w: usize, sy: isize, sx: isize) -> f64 {
    let (y0, y1) = valid_range(h, sy);
    let (x0, x1) = valid_range(w, sx);
    if x0 >= x1 {
        return 0.0;
    }
    let mut acc = 0.0f64;
    for y in y0..y1 {
        let b_row = &b[(((y as isize + sy) as usize * w) as isize + x0 as isize + sx) as usize..][..x1 - x0];
        let a_row = &a[y * w + x0..y * w + x1];
        for (&p, &q) in a_row.iter().zip(b_row) {
            acc += p as f64 * q as f64;
        }
    }
    acc
}

pub(crate) fn conv_forward(
    x: &[f32],
    [n, c, h, w]: [usize; 4],
    weights: &[f32],
    [o, _, kh, kw]: [usize; 4],
    bias: &[f32],
) -> Vec<f32> {
    let hw = h * w;
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = vec![0.0f32; n * o * hw];
    out.par_chunks_mut(hw).enumerate().for_each_init(
        || vec![0.0f64; hw],
        |acc, (idx, out_plane)| {
            let (b, oc) = (idx / o, idx % o);
            acc.fill(bias[oc] as f64);
            for ci in 0..c {
                let src = &x[(b * c + ci) * hw..][..hw];
                let kbase = (oc * c + ci) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = weights[kbase + ky * kw + kx] as f64;
                        accumulate_shifted(acc, src, h, w, ky as isize - ph, kx as isize - pw, wv);
                    }
                }
            }
            for (dst, &v) in out_plane.iter_mut().zip(acc.iter()) {
                *dst = v as f32;
            }
        },
    );
    out
}

/// Gradient of a same convolution with respect to its input.
pub(crate) fn conv_backward_input(
    dy: &[f32],
    [n, c, h, w]: [usize; 4],
    weights: &[f32],
    [o, _, kh, kw]: [usize; 4],
) -> Vec<f32> {
    let hw = h * w;
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut dx = vec![0.0f32; n * c * hw];
    dx.par_chunks_mut(hw).enumerate().for_each_init(
        || vec![0.0f64; hw],
        |acc, (idx, dx_plane)| {
            let (b, ci) = (idx / c, idx % c);
            acc.fill(0.0);
            for oc in 0..o {
                let src = &dy[(b * o + oc) * hw..][..hw];
                let kbase = (oc * c + ci) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = weights[kbase + ky * kw + kx] as f64;
                        accumulate_shifted(acc, src, h, w, ph - ky as isize, pw - kx as isize, wv);
                    }
                }
            }
            for (dst, &v) in dx_plane.iter_mut().zip(acc.iter()) {
                *dst = v as f32;
            }
        },
    );
    dx
}

/// Gradients of a same convolution with respect to weights and bias.
pub(crate) fn conv_backward_params(
    dy: &[f32],
    x: &[f32],
    [n, c, h, w]: [usize; 4],
    [o, _, kh, kw]: [usize; 4],
) -> (Vec<f32>, Vec<f32>) {
    let hw = h * w;
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let per_out = c * kh * kw;
    let mut dw = vec![0.0f32; o * per_out];
    dw.par_chunks_mut(per_out).enumerate().for_each(|(oc, dw_row)| {
        for ci in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = 0.0f64;
                    for b in 0..n {
                        let g = &dy[(b * o + oc) * hw..][..hw];
                        let xin = &x[(b * c + ci) * hw..][..hw];
                        acc += shifted_dot(g, xin, h, w, ky as isize - ph, kx as isize - pw);
                    }
                    dw_row[(ci * kh + ky) * kw + kx] = acc as f32;
                }
            }
        }
    });
    let db = (0..o)
        .map(|oc| {
            let mut acc = 0.0f64;
            for b in 0..n {
                acc += dy[(b * o + oc) * hw..][..hw].iter().map(|&v| v as f64).sum::<f64>();
            }
            acc as f32
        })
        .collect();
    (dw, db)
}

/// `max(x, 0)`, letting NaN through so non-finite values reach the loss.
#[inline]
pub(crate) fn relu_scalar(v: f32) -> f32 {
    if v < 0.0 {
        0.0
    } else {
        v
    }
}

pub fn relu(input: &Tensor) -> Tensor {
    let values = input.values().iter().map(|&v| relu_scalar(v)).collect();
    Tensor::from_vec(input.shape().clone(), values).expect("shape preserved")
}

pub(crate) fn relu_backward(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter().zip(dy).map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 }).collect()
}

/// Stacks inputs along the channel axis in argument order.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs.first().ok_or_else(|| Error::Shape("concat of an empty tensor list".into()))?;
    let [n, _, h, w] = first.dims4();
    let mut total = 0;
    for t in inputs {
        let [tn, tc, th, tw] = t.dims4();
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::Shape(format!("concat expects batch {n} and spatial {h}×{w}, got {}", t.shape())));
        }
        total += tc;
    }
    let hw = h * w;
    let mut values = Vec::with_capacity(n * total * hw);
    for b in 0..n {
        for t in inputs {
            let tc = t.dims4()[1];
            values.extend_from_slice(&t.values()[b * tc * hw..(b + 1) * tc * hw]);
        }
    }
    Tensor::new(&[n, total, h, w], values)
}

/// Splits a concatenated gradient back into per-input blocks.
pub(crate) fn split_channels(dy: &[f32], [n, _, h, w]: [usize; 4], counts: &[usize]) -> Vec<Vec<f32>> {
    let hw = h * w;
    let total: usize = counts.iter().sum();
    let mut parts: Vec<Vec<f32>> = counts.iter().map(|&c| Vec::with_capacity(n * c * hw)).collect();
    for b in 0..n {
        let mut offset = b * total * hw;
        for (part, &c) in parts.iter_mut().zip(counts) {
            part.extend_from_slice(&dy[offset..offset + c * hw]);
            offset += c * hw;
        }
    }
    parts
}

/// Lays each selected pixel's channel vector out row-major as a `(1, mesh_h, mesh_w)` image.
///
/// Pixels are addressed by their flat index `(n * H + y) * W + x`; `None` selects
/// every pixel in that order.
pub fn to_mesh(features: &Tensor, mesh_h: usize, mesh_w: usize, pixels: Option<&[usize]>) -> Result<Tensor> {
    let [n, c, h, w] = features.dims4();
    if c != mesh_h * mesh_w {
        return Err(Error::Config(format!(
            "a {mesh_h}×{mesh_w} mesh needs {} features per pixel, got {c}",
            mesh_h * mesh_w
        )));
    }
    let hw = h * w;
    let count = pixels.map_or(n * hw, <[usize]>::len);
    if count == 0 {
        return Err(Error::Shape("mesh of zero pixels".into()));
    }
    let src = features.values();
    let mut values = vec![0.0f32; count * c];
    for (m, mesh) in values.chunks_mut(c).enumerate() {
        let p = pixels.map_or(m, |sel| sel[m]);
        if p >= n * hw {
            return Err(Error::Shape(format!("pixel index {p} outside {}", features.shape())));
        }
        let (b, yx) = (p / hw, p % hw);
        for (ch, v) in mesh.iter_mut().enumerate() {
            *v = src[(b * c + ch) * hw + yx];
        }
    }
    Tensor::new(&[count, 1, mesh_h, mesh_w], values)
}

/// Inverse of [`to_mesh`] over all pixels: `(N·H·W, 1, mh, mw)` back to `(N, mh·mw, H, W)`.
pub fn from_mesh(mesh: &Tensor, n: usize, h: usize, w: usize) -> Result<Tensor> {
    let [m, one, mh, mw] = mesh.dims4();
    if one != 1 || m != n * h * w {
        return Err(Error::Shape(format!("mesh {} does not hold {n}×{h}×{w} pixels", mesh.shape())));
    }
    let c = mh * mw;
    let mut out = vec![0.0f32; n * c * h * w];
    scatter_mesh(mesh.values(), &mut out, [n, c, h, w], None);
    Tensor::new(&[n, c, h, w], out)
}

/// Adds each mesh back onto its pixel's channel vector.
pub(crate) fn scatter_mesh(mesh: &[f32], out: &mut [f32], [_, c, h, w]: [usize; 4], pixels: Option<&[usize]>) {
    let hw = h * w;
    for (m, vals) in mesh.chunks(c).enumerate() {
        let p = pixels.map_or(m, |sel| sel[m]);
        let (b, yx) = (p / hw, p % hw);
        for (ch, &v) in vals.iter().enumerate() {
            out[(b * c + ch) * hw + yx] += v;
        }
    }
}

/// Mean over the spatial extent of every channel: `(N, C, H, W)` to `(N, C, 1, 1)`.
pub fn global_avg_pool(input: &Tensor) -> Tensor {
    let [n, c, h, w] = input.dims4();
    let hw = h * w;
    let values = input
        .values()
        .chunks(hw)
        .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
        .collect();
    Tensor::new(&[n, c, 1, 1], values).expect("pooled shape")
}

/// Per-pixel softmax across the channel axis.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let [n, k, h, w] = logits.dims4();
    let hw = h * w;
    let src = logits.values();
    let mut out = vec![0.0f32; src.len()];
    let mut scratch = vec![0.0f64; k];
    for b in 0..n {
        for p in 0..hw {
            let max = (0..k).map(|j| src[(b * k + j) * hw + p]).fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut sum = 0.0;
            for (j, s) in scratch.iter_mut().enumerate() {
                *s = (src[(b * k + j) * hw + p] as f64 - max).exp();
                sum += *s;
            }
            for (j, s) in scratch.iter().enumerate() {
                out[(b * k + j) * hw + p] = (s / sum) as f32;
            }
        }
    }
    Tensor::from_vec(logits.shape().clone(), out).expect("shape preserved")
}

/// Weighted mean cross-entropy of per-pixel softmax predictions.
///
/// `labels` and `weights` are indexed by flat pixel `(n * H + y) * W + x`. With
/// no weights every pixel counts once; when all weights are zero the loss and
/// gradient are zero. Returns the loss and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize], weights: Option<&[f32]>) -> Result<(f64, Vec<f32>)> {
    let [n, k, h, w] = logits.dims4();
    let hw = h * w;
    let pixels = n * hw;
    if labels.len() != pixels {
        return Err(Error::Shape(format!("{} labels for {pixels} pixels of {}", labels.len(), logits.shape())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} outside [0, {k})")));
    }
    if let Some(wts) = weights {
        if wts.len() != pixels {
            return Err(Error::Shape(format!("{} weights for {pixels} pixels", wts.len())));
        }
        if wts.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::Data("loss weights must be finite and nonnegative".into()));
        }
    }
    let weight = |p: usize| weights.map_or(1.0, |wts| wts[p] as f64);
    let total: f64 = (0..pixels).map(weight).sum();
    let mut grad = vec![0.0f32; logits.len()];
    if total <= 0.0 {
        return Ok((0.0, grad));
    }
    let src = logits.values();
    let mut probs = vec![0.0f64; k];
    let mut loss = 0.0f64;
    for b in 0..n {
        for yx in 0..hw {
            let p = b * hw + yx;
            let wv = weight(p);
            if wv == 0.0 {
                continue;
            }
            let at = |j: usize| (b * k + j) * hw + yx;
            let max = (0..k).map(|j| src[at(j)] as f64).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, q) in probs.iter_mut().enumerate() {
                *q = (src[at(j)] as f64 - max).exp();
                sum += *q;
            }
            let label = labels[p];
            loss += wv * (sum.ln() - (src[at(label)] as f64 - max));
            let scale = wv / total;
            for (j, q) in probs.iter().enumerate() {
                let target = if j == label { 1.0 } else { 0.0 };
                grad[at(j)] = (scale * (q / sum - target)) as f32;
            }
        }
    }
    Ok((loss / total, grad))
}
