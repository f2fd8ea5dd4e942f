//! Tensor operations and their reverse-mode derivatives.
//!
//! Convolution uses cross-correlation semantics (no kernel flip). Max pooling
//! pads with negative infinity, bilinear upsampling is corner-aligned, and
//! softmax cross-entropy is stabilized by max subtraction. Each forward op
//! records an [`Op`] node when gradients are enabled and some input requires
//! them.

use std::collections::HashMap;

use rayon::prelude::*;

use super::linalg::{col2im_add, im2col, matmul, matmul_a_bt, matmul_at_b, ConvGeom};
use super::{flow_into, grad_enabled, Element, Tensor};
use crate::error::{Error, Result};

/// Recorded operation linking an output tensor to its inputs.
pub(crate) enum Op<T: Element> {
    Conv2d {
        input: Tensor<T>,
        kernels: Tensor<T>,
        geom: ConvGeom,
    },
    MaxPool2d {
        input: Tensor<T>,
        /// Flat index into the input sample-channel plane of each output cell's max.
        argmax: Vec<usize>,
    },
    AdaptiveAvgPool {
        input: Tensor<T>,
        bins: usize,
    },
    UpsampleBilinear {
        input: Tensor<T>,
    },
    ConcatChannels {
        inputs: Vec<Tensor<T>>,
    },
    Dense {
        input: Tensor<T>,
        weights: Tensor<T>,
        bias: Tensor<T>,
    },
    SoftmaxCrossEntropy {
        logits: Tensor<T>,
        labels: Vec<usize>,
        /// Softmax probabilities, cached at forward time, layout as logits.
        probs: Vec<T>,
        /// Spatial positions per sample (1 for plain `[N,K]` logits).
        spatial: usize,
    },
    Relu {
        input: Tensor<T>,
    },
    Add {
        lhs: Tensor<T>,
        rhs: Tensor<T>,
    },
    Sum {
        input: Tensor<T>,
    },
    Scale {
        input: Tensor<T>,
        factor: T,
    },
    Reshape {
        input: Tensor<T>,
    },
}

impl<T: Element> Op<T> {
    pub(crate) fn parents(&self) -> Vec<Tensor<T>> {
        match self {
            Op::Conv2d { input, kernels, .. } => vec![input.clone(), kernels.clone()],
            Op::MaxPool2d { input, .. }
            | Op::AdaptiveAvgPool { input, .. }
            | Op::UpsampleBilinear { input }
            | Op::Relu { input }
            | Op::Sum { input }
            | Op::Scale { input, .. }
            | Op::Reshape { input } => vec![input.clone()],
            Op::ConcatChannels { inputs } => inputs.clone(),
            Op::Dense {
                input,
                weights,
                bias,
            } => vec![input.clone(), weights.clone(), bias.clone()],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits.clone()],
            Op::Add { lhs, rhs } => vec![lhs.clone(), rhs.clone()],
        }
    }

    pub(crate) fn backward(
        &self,
        grad: &[T],
        node: &Tensor<T>,
        flowing: &mut HashMap<usize, Vec<T>>,
    ) {
        match self {
            Op::Conv2d {
                input,
                kernels,
                geom,
            } => conv2d_backward(grad, input, kernels, geom, flowing),
            Op::MaxPool2d { input, argmax } => {
                if input.requires_grad() {
                    let plane = geom_plane(input.shape());
                    let planes = input.numel() / plane;
                    let out_plane = grad.len() / planes;
                    let mut dinput = vec![T::zero(); input.numel()];
                    for p in 0..planes {
                        for cell in 0..out_plane {
                            let src = argmax[p * out_plane + cell];
                            dinput[p * plane + src] += grad[p * out_plane + cell];
                        }
                    }
                    flow_into(flowing, input, dinput);
                }
            }
            Op::AdaptiveAvgPool { input, bins } => {
                if input.requires_grad() {
                    let (h, w) = hw(input.shape());
                    let planes = input.numel() / (h * w);
                    let mut dinput = vec![T::zero(); input.numel()];
                    for p in 0..planes {
                        for by in 0..*bins {
                            let (y0, y1) = bin_range(by, *bins, h);
                            for bx in 0..*bins {
                                let (x0, x1) = bin_range(bx, *bins, w);
                                let count = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                                let share = grad[(p * bins + by) * bins + bx] / count;
                                for y in y0..y1 {
                                    for x in x0..x1 {
                                        dinput[p * h * w + y * w + x] += share;
                                    }
                                }
                            }
                        }
                    }
                    flow_into(flowing, input, dinput);
                }
            }
            Op::UpsampleBilinear { input } => {
                if input.requires_grad() {
                    let (h, w) = hw(input.shape());
                    let (th, tw) = hw(node.shape());
                    let planes = input.numel() / (h * w);
                    let mut dinput = vec![T::zero(); input.numel()];
                    for p in 0..planes {
                        let out_plane = &grad[p * th * tw..(p + 1) * th * tw];
                        let in_plane = &mut dinput[p * h * w..(p + 1) * h * w];
                        for oy in 0..th {
                            let (y0, y1, wy) = lerp_coords(oy, th, h);
                            for ox in 0..tw {
                                let (x0, x1, wx) = lerp_coords(ox, tw, w);
                                let g = out_plane[oy * tw + ox];
                                in_plane[y0 * w + x0] += g * (T::one() - wy) * (T::one() - wx);
                                in_plane[y0 * w + x1] += g * (T::one() - wy) * wx;
                                in_plane[y1 * w + x0] += g * wy * (T::one() - wx);
                                in_plane[y1 * w + x1] += g * wy * wx;
                            }
                        }
                    }
                    flow_into(flowing, input, dinput);
                }
            }
            Op::ConcatChannels { inputs } => {
                let (n, _, h, w) = nchw(node.shape());
                let total_c = node.shape()[1];
                let mut offset = 0;
                for inp in inputs {
                    let ci = inp.shape()[1];
                    if inp.requires_grad() {
                        let mut dinput = vec![T::zero(); inp.numel()];
                        for s in 0..n {
                            for c in 0..ci {
                                let src = ((s * total_c + offset + c) * h) * w;
                                let dst = ((s * ci + c) * h) * w;
                                dinput[dst..dst + h * w].copy_from_slice(&grad[src..src + h * w]);
                            }
                        }
                        flow_into(flowing, inp, dinput);
                    }
                    offset += ci;
                }
            }
            Op::Dense {
                input,
                weights,
                bias,
            } => {
                let n = input.shape()[0];
                let d = input.shape()[1];
                let m = weights.shape()[1];
                if input.requires_grad() {
                    let w = weights.buf();
                    // dX = dOut @ W^T
                    flow_into(flowing, input, matmul_a_bt(grad, &w, n, m, d));
                }
                if weights.requires_grad() {
                    let x = input.buf();
                    // dW = X^T @ dOut
                    flow_into(flowing, weights, matmul_at_b(&x, grad, n, d, m));
                }
                if bias.requires_grad() {
                    let mut db = vec![T::zero(); m];
                    for row in grad.chunks(m) {
                        for (acc, &g) in db.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    flow_into(flowing, bias, db);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
                spatial,
            } => {
                if logits.requires_grad() {
                    let k = logits.shape()[1];
                    let s = *spatial;
                    let n = logits.shape()[0];
                    let scale = grad[0] / T::from_f64((n * s) as f64);
                    let mut dlogits = vec![T::zero(); logits.numel()];
                    for sample in 0..n {
                        for pos in 0..s {
                            let label = labels[sample * s + pos];
                            for class in 0..k {
                                let idx = (sample * k + class) * s + pos;
                                let indicator = if class == label { T::one() } else { T::zero() };
                                dlogits[idx] = scale * (probs[idx] - indicator);
                            }
                        }
                    }
                    flow_into(flowing, logits, dlogits);
                }
            }
            Op::Relu { input } => {
                if input.requires_grad() {
                    let x = input.buf();
                    let dinput = grad
                        .iter()
                        .zip(x.iter())
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    drop(x);
                    flow_into(flowing, input, dinput);
                }
            }
            Op::Add { lhs, rhs } => {
                if lhs.requires_grad() {
                    flow_into(flowing, lhs, grad.to_vec());
                }
                if rhs.requires_grad() {
                    flow_into(flowing, rhs, grad.to_vec());
                }
            }
            Op::Sum { input } => {
                if input.requires_grad() {
                    flow_into(flowing, input, vec![grad[0]; input.numel()]);
                }
            }
            Op::Scale { input, factor } => {
                if input.requires_grad() {
                    flow_into(flowing, input, grad.iter().map(|&g| g * *factor).collect());
                }
            }
            Op::Reshape { input } => {
                if input.requires_grad() {
                    flow_into(flowing, input, grad.to_vec());
                }
            }
        }
    }
}

fn record<T: Element>(inputs: &[&Tensor<T>]) -> bool {
    grad_enabled() && inputs.iter().any(|t| t.requires_grad())
}

fn nchw(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

fn hw(shape: &[usize]) -> (usize, usize) {
    (shape[shape.len() - 2], shape[shape.len() - 1])
}

fn geom_plane(shape: &[usize]) -> usize {
    let (h, w) = hw(shape);
    h * w
}

fn expect_rank<T: Element>(t: &Tensor<T>, rank: usize, what: &str) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::Dimension(format!(
            "{what} expects a rank-{rank} tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Adaptive pooling bin `[start, end)` over an axis of length `len`.
fn bin_range(i: usize, bins: usize, len: usize) -> (usize, usize) {
    let start = i * len / bins;
    let end = ((i + 1) * len + bins - 1) / bins;
    (start, end.min(len))
}

/// Corner-aligned source coordinates for output index `o` of `t_len` mapped
/// onto an axis of `s_len`: floor cell, ceil cell, fractional weight.
fn lerp_coords<T: Element>(o: usize, t_len: usize, s_len: usize) -> (usize, usize, T) {
    if t_len <= 1 || s_len <= 1 {
        return (0, 0, T::zero());
    }
    let pos = o as f64 * (s_len - 1) as f64 / (t_len - 1) as f64;
    let lo = pos.floor() as usize;
    let lo = lo.min(s_len - 1);
    let hi = (lo + 1).min(s_len - 1);
    (lo, hi, T::from_f64(pos - lo as f64))
}

impl<T: Element> Tensor<T> {
    /// 2-D cross-correlation of `[N,C,H,W]` with kernels `[K,C,kh,kw]`.
    pub fn conv2d(&self, kernels: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
        expect_rank(self, 4, "conv2d input")?;
        expect_rank(kernels, 4, "conv2d kernels")?;
        let (n, c, h, w) = nchw(self.shape());
        let (k, kc, kh, kw) = nchw(kernels.shape());
        if kc != c {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input has {c} channels, kernels expect {kc}"
            )));
        }
        let geom = ConvGeom::new(h, w, kh, kw, stride, padding).ok_or_else(|| {
            Error::Dimension(format!(
                "conv2d kernel {kh}x{kw} (stride {stride}) does not fit {h}x{w} input with padding {padding}"
            ))
        })?;

        let out_plane = geom.out_h * geom.out_w;
        let mut out = vec![T::zero(); n * k * out_plane];
        {
            let input = self.buf();
            let kern = kernels.buf();
            let sample_len = c * h * w;
            // Samples write disjoint output slices: deterministic under rayon.
            out.par_chunks_mut(k * out_plane)
                .enumerate()
                .for_each(|(s, out_s)| {
                    let cols = im2col(&input[s * sample_len..(s + 1) * sample_len], c, &geom);
                    let prod = matmul(&kern, &cols, k, c * kh * kw, out_plane);
                    out_s.copy_from_slice(&prod);
                });
        }

        let shape = vec![n, k, geom.out_h, geom.out_w];
        if record(&[self, kernels]) {
            Ok(Tensor::from_op(
                shape,
                out,
                Op::Conv2d {
                    input: self.clone(),
                    kernels: kernels.clone(),
                    geom,
                },
            ))
        } else {
            Tensor::from_vec(out, &shape)
        }
    }

    /// Max pooling with square window; padding cells count as negative infinity.
    pub fn max_pool2d(&self, size: usize, stride: usize, padding: usize) -> Result<Tensor<T>> {
        expect_rank(self, 4, "max_pool2d input")?;
        if size == 0 || stride == 0 {
            return Err(Error::Config("max_pool2d size and stride must be positive".into()));
        }
        if padding >= size {
            return Err(Error::Config(format!(
                "max_pool2d padding {padding} must be smaller than window size {size}"
            )));
        }
        let (n, c, h, w) = nchw(self.shape());
        let geom = ConvGeom::new(h, w, size, size, stride, padding).ok_or_else(|| {
            Error::Dimension(format!(
                "max_pool2d window {size} does not fit {h}x{w} input with padding {padding}"
            ))
        })?;

        let out_plane = geom.out_h * geom.out_w;
        let planes = n * c;
        let mut out = vec![T::zero(); planes * out_plane];
        let mut argmax = vec![0usize; planes * out_plane];
        {
            let input = self.buf();
            for p in 0..planes {
                let plane = &input[p * h * w..(p + 1) * h * w];
                for oy in 0..geom.out_h {
                    for ox in 0..geom.out_w {
                        let mut best = T::neg_infinity();
                        let mut best_idx = usize::MAX;
                        for u in 0..size {
                            let iy = (oy * stride + u) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for v in 0..size {
                                let ix = (ox * stride + v) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = iy as usize * w + ix as usize;
                                if plane[idx] > best {
                                    best = plane[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        debug_assert_ne!(best_idx, usize::MAX, "pool window fell entirely in padding");
                        out[p * out_plane + oy * geom.out_w + ox] = best;
                        argmax[p * out_plane + oy * geom.out_w + ox] = best_idx;
                    }
                }
            }
        }

        let shape = vec![n, c, geom.out_h, geom.out_w];
        if record(&[self]) {
            Ok(Tensor::from_op(
                shape,
                out,
                Op::MaxPool2d {
                    input: self.clone(),
                    argmax,
                },
            ))
        } else {
            Tensor::from_vec(out, &shape)
        }
    }

    /// Adaptive average pooling of `[N,C,H,W]` to `[N,C,out,out]`.
    ///
    /// Bin `(i,j)` averages rows `[floor(i*H/out), ceil((i+1)*H/out))` and the
    /// analogous columns; `out == 1` is exactly the per-channel mean.
    pub fn adaptive_avg_pool(&self, out_size: usize) -> Result<Tensor<T>> {
        expect_rank(self, 4, "adaptive_avg_pool input")?;
        let (n, c, h, w) = nchw(self.shape());
        if out_size == 0 || out_size > h || out_size > w {
            return Err(Error::Dimension(format!(
                "adaptive_avg_pool output {out_size} must be in 1..=min({h},{w})"
            )));
        }
        let planes = n * c;
        let mut out = vec![T::zero(); planes * out_size * out_size];
        {
            let input = self.buf();
            for p in 0..planes {
                let plane = &input[p * h * w..(p + 1) * h * w];
                for by in 0..out_size {
                    let (y0, y1) = bin_range(by, out_size, h);
                    for bx in 0..out_size {
                        let (x0, x1) = bin_range(bx, out_size, w);
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            for x in x0..x1 {
                                acc += plane[y * w + x];
                            }
                        }
                        let count = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                        out[(p * out_size + by) * out_size + bx] = acc / count;
                    }
                }
            }
        }

        let shape = vec![n, c, out_size, out_size];
        if record(&[self]) {
            Ok(Tensor::from_op(
                shape,
                out,
                Op::AdaptiveAvgPool {
                    input: self.clone(),
                    bins: out_size,
                },
            ))
        } else {
            Tensor::from_vec(out, &shape)
        }
    }

    /// Corner-aligned bilinear upsampling of `[N,C,h,w]` to `[N,C,th,tw]`.
    pub fn upsample_bilinear(&self, target_h: usize, target_w: usize) -> Result<Tensor<T>> {
        expect_rank(self, 4, "upsample_bilinear input")?;
        let (n, c, h, w) = nchw(self.shape());
        if target_h < h || target_w < w {
            return Err(Error::Dimension(format!(
                "upsample target {target_h}x{target_w} smaller than source {h}x{w}"
            )));
        }
        let planes = n * c;
        let mut out = vec![T::zero(); planes * target_h * target_w];
        {
            let input = self.buf();
            for p in 0..planes {
                let plane = &input[p * h * w..(p + 1) * h * w];
                let out_plane = &mut out[p * target_h * target_w..(p + 1) * target_h * target_w];
                for oy in 0..target_h {
                    let (y0, y1, wy) = lerp_coords::<T>(oy, target_h, h);
                    for ox in 0..target_w {
                        let (x0, x1, wx) = lerp_coords::<T>(ox, target_w, w);
                        let top = plane[y0 * w + x0]
                            + (plane[y0 * w + x1] - plane[y0 * w + x0]) * wx;
                        let bottom = plane[y1 * w + x0]
                            + (plane[y1 * w + x1] - plane[y1 * w + x0]) * wx;
                        out_plane[oy * target_w + ox] = top + (bottom - top) * wy;
                    }
                }
            }
        }

        let shape = vec![n, c, target_h, target_w];
        if record(&[self]) {
            Ok(Tensor::from_op(
                shape,
                out,
                Op::UpsampleBilinear {
                    input: self.clone(),
                },
            ))
        } else {
            Tensor::from_vec(out, &shape)
        }
    }

    /// Affine map `[N,D] @ [D,M] + [M]`.
    pub fn dense(&self, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        expect_rank(self, 2, "dense input")?;
        expect_rank(weights, 2, "dense weights")?;
        expect_rank(bias, 1, "dense bias")?;
        let (n, d) = (self.shape()[0], self.shape()[1]);
        let (wd, m) = (weights.shape()[0], weights.shape()[1]);
        if wd != d || bias.shape()[0] != m {
            return Err(Error::Dimension(format!(
                "dense shapes disagree: input [{n},{d}], weights [{wd},{m}], bias [{}]",
                bias.shape()[0]
            )));
        }
        let mut out = {
            let x = self.buf();
            let w = weights.buf();
            matmul(&x, &w, n, d, m)
        };
        {
            let b = bias.buf();
            for row in out.chunks_mut(m) {
                for (o, &bv) in row.iter_mut().zip(b.iter()) {
                    *o += bv;
                }
            }
        }
        let shape = vec![n, m];
        if record(&[self, weights, bias]) {
            Ok(Tensor::from_op(
                shape,
                out,
                Op::Dense {
                    input: self.clone(),
                    weights: weights.clone(),
                    bias: bias.clone(),
                },
            ))
        } else {
            Tensor::from_vec(out, &shape)
        }
    }

    /// Elementwise rectifier.
    pub fn relu(&self) -> Tensor<T> {
        let out: Vec<T> = self
            .buf()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.shape().to_vec();
        if record(&[self]) {
            Tensor::from_op(shape, out, Op::Relu { input: self.clone() })
        } else {
            Tensor::from_vec(out, &shape).expect("shape preserved")
        }
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let out: Vec<T> = {
            let a = self.buf();
            let b = other.buf();
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        let shape = self.shape().to_vec();
        if record(&[self, other]) {
            Ok(Tensor::from_op(
                shape,
                out,
                Op::Add {
                    lhs: self.clone(),
                    rhs: other.clone(),
                },
            ))
        } else {
            Tensor::from_vec(out, &shape)
        }
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&self) -> Tensor<T> {
        let total: T = self.buf().iter().copied().sum();
        if record(&[self]) {
            Tensor::from_op(vec![1], vec![total], Op::Sum { input: self.clone() })
        } else {
            Tensor::scalar(total)
        }
    }

    /// Multiplication by a constant.
    pub fn scale(&self, factor: T) -> Tensor<T> {
        let out: Vec<T> = self.buf().iter().map(|&v| v * factor).collect();
        let shape = self.shape().to_vec();
        if record(&[self]) {
            Tensor::from_op(
                shape,
                out,
                Op::Scale {
                    input: self.clone(),
                    factor,
                },
            )
        } else {
            Tensor::from_vec(out, &shape).expect("shape preserved")
        }
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                new_shape
            )));
        }
        let out = self.to_vec();
        if record(&[self]) {
            Ok(Tensor::from_op(
                new_shape.to_vec(),
                out,
                Op::Reshape { input: self.clone() },
            ))
        } else {
            Tensor::from_vec(out, new_shape)
        }
    }
}

fn conv2d_backward<T: Element>(
    grad: &[T],
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    geom: &ConvGeom,
    flowing: &mut HashMap<usize, Vec<T>>,
) {
    let (n, c, h, w) = nchw(input.shape());
    let (k, _, kh, kw) = nchw(kernels.shape());
    let ckk = c * kh * kw;
    let out_plane = geom.out_h * geom.out_w;
    let sample_len = c * h * w;

    if input.requires_grad() {
        let kern = kernels.buf();
        let mut dinput = vec![T::zero(); n * sample_len];
        dinput
            .par_chunks_mut(sample_len)
            .enumerate()
            .for_each(|(s, din_s)| {
                let dout_s = &grad[s * k * out_plane..(s + 1) * k * out_plane];
                // dcols = kernels^T @ dout
                let dcols = matmul_at_b(&kern, dout_s, k, ckk, out_plane);
                col2im_add(&dcols, c, geom, din_s);
            });
        drop(kern);
        flow_into(flowing, input, dinput);
    }

    if kernels.requires_grad() {
        let inp = input.buf();
        let mut dk = vec![T::zero(); k * ckk];
        // Sequential over samples so accumulation order is fixed.
        for s in 0..n {
            let cols = im2col(&inp[s * sample_len..(s + 1) * sample_len], c, geom);
            let dout_s = &grad[s * k * out_plane..(s + 1) * k * out_plane];
            let contrib = matmul_a_bt(dout_s, &cols, k, out_plane, ckk);
            for (acc, v) in dk.iter_mut().zip(contrib) {
                *acc += v;
            }
        }
        drop(inp);
        flow_into(flowing, kernels, dk);
    }
}

/// Channel-axis concatenation of `[N,Ci,H,W]` tensors sharing `N,H,W`.
pub fn concat_channels<T: Element>(inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
    if inputs.is_empty() {
        return Err(Error::Usage("concat_channels requires at least one input".into()));
    }
    for t in inputs {
        expect_rank(t, 4, "concat_channels input")?;
    }
    let (n, _, h, w) = nchw(inputs[0].shape());
    for t in &inputs[1..] {
        let (tn, _, th, tw) = nchw(t.shape());
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::Dimension(format!(
                "concat_channels mismatch: {:?} vs {:?}",
                inputs[0].shape(),
                t.shape()
            )));
        }
    }
    let total_c: usize = inputs.iter().map(|t| t.shape()[1]).sum();
    let mut out = vec![T::zero(); n * total_c * h * w];
    let mut offset = 0;
    for t in inputs {
        let ci = t.shape()[1];
        let data = t.buf();
        for s in 0..n {
            let src = s * ci * h * w;
            let dst = (s * total_c + offset) * h * w;
            out[dst..dst + ci * h * w].copy_from_slice(&data[src..src + ci * h * w]);
        }
        offset += ci;
    }
    let shape = vec![n, total_c, h, w];
    let refs: Vec<&Tensor<T>> = inputs.iter().collect();
    if record(&refs) {
        Ok(Tensor::from_op(
            shape,
            out,
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
        ))
    } else {
        Tensor::from_vec(out, &shape)
    }
}

/// Mean cross-entropy of `[N,K]` logits against class indices, stabilized by
/// max subtraction.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    expect_rank(logits, 2, "softmax_cross_entropy logits")?;
    cross_entropy_impl(logits, labels, 1)
}

/// Per-pixel mean cross-entropy of `[N,K,H,W]` logits against `N*H*W` class
/// indices in row-major order.
pub fn softmax_cross_entropy_spatial<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<Tensor<T>> {
    expect_rank(logits, 4, "softmax_cross_entropy_spatial logits")?;
    let (h, w) = hw(logits.shape());
    cross_entropy_impl(logits, labels, h * w)
}

fn cross_entropy_impl<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
    spatial: usize,
) -> Result<Tensor<T>> {
    let n = logits.shape()[0];
    let k = logits.shape()[1];
    if labels.len() != n * spatial {
        return Err(Error::Dimension(format!(
            "expected {} labels, got {}",
            n * spatial,
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index(format!(
            "label {bad} out of range for {k} classes"
        )));
    }

    let data = logits.buf();
    let mut probs = vec![T::zero(); logits.numel()];
    let mut total = 0.0f64;
    for sample in 0..n {
        for pos in 0..spatial {
            let at = |class: usize| data[(sample * k + class) * spatial + pos];
            let mut max = at(0);
            for class in 1..k {
                if at(class) > max {
                    max = at(class);
                }
            }
            let mut denom = T::zero();
            for class in 0..k {
                let e = (at(class) - max).exp();
                probs[(sample * k + class) * spatial + pos] = e;
                denom += e;
            }
            for class in 0..k {
                probs[(sample * k + class) * spatial + pos] /= denom;
            }
            let label = labels[sample * spatial + pos];
            // log-sum-exp form: -log softmax = log(denom) - (z_y - max)
            total += denom.as_f64().ln() - (at(label) - max).as_f64();
        }
    }
    drop(data);
    let loss = T::from_f64(total / (n * spatial) as f64);

    if record(&[logits]) {
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits: logits.clone(),
                labels: labels.to_vec(),
                probs,
                spatial,
            },
        ))
    } else {
        Ok(Tensor::scalar(loss))
    }
}

/// Row-wise softmax of a `[rows, k]` buffer (inference helper, no graph).
pub fn softmax_rows<T: Element>(data: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let denom: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / denom));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data, shape).unwrap()
    }

    #[test]
    fn conv2d_table_stem_shape() {
        // 7x7, 64 kernels, stride 2, padding 3: 224 -> 112
        let input = Tensor::<f64>::zeros(&[1, 3, 224, 224]);
        let kernels = Tensor::<f64>::zeros(&[64, 3, 7, 7]);
        let out = input.conv2d(&kernels, 2, 3).unwrap();
        assert_eq!(out.shape(), &[1, 64, 112, 112]);
    }

    #[test]
    fn conv2d_zero_input_zero_output() {
        let input = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        let kernels = t(vec![1.0, 2.0, -1.0, 0.5], &[1, 1, 2, 2]);
        let out = input.conv2d(&kernels, 1, 0).unwrap();
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_ones_window_sum() {
        // 4x4 ones, 2x2 ones kernel, stride 2: every output is 4.0
        let input = Tensor::full(&[1, 1, 4, 4], 1.0f64);
        let kernels = Tensor::full(&[1, 1, 2, 2], 1.0f64);
        let out = input.conv2d(&kernels, 2, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.to_vec(), vec![4.0; 4]);
    }

    #[test]
    fn conv2d_channel_mismatch_errors() {
        let input = Tensor::<f64>::zeros(&[1, 3, 8, 8]);
        let kernels = Tensor::<f64>::zeros(&[4, 2, 3, 3]);
        assert!(matches!(
            input.conv2d(&kernels, 1, 1),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn conv2d_cross_correlation_no_flip() {
        // Asymmetric kernel distinguishes correlation from convolution.
        // input row [1,2,3], kernel [1,0]: correlation -> [1*1+2*0, 2*1+3*0] = [1,2]
        let input = t(vec![1.0, 2.0, 3.0], &[1, 1, 1, 3]);
        let kernels = t(vec![1.0, 0.0], &[1, 1, 1, 2]);
        let out = input.conv2d(&kernels, 1, 0).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn max_pool_table_shape_and_values() {
        let input = Tensor::<f64>::zeros(&[1, 64, 112, 112]);
        let out = input.max_pool2d(3, 2, 1).unwrap();
        assert_eq!(out.shape(), &[1, 64, 56, 56]);

        let input = t(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let out = input.max_pool2d(2, 2, 0).unwrap();
        assert_eq!(out.to_vec(), vec![4.0]);
    }

    #[test]
    fn max_pool_constant_input() {
        let input = Tensor::full(&[1, 2, 6, 6], 2.5f64);
        let out = input.max_pool2d(3, 2, 1).unwrap();
        assert!(out.to_vec().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn max_pool_window_too_large_errors() {
        let input = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(input.max_pool2d(5, 1, 0).is_err());
    }

    #[test]
    fn adaptive_pool_identity_and_means() {
        let input = t((0..16).map(|v| v as f64).collect(), &[1, 1, 4, 4]);
        let same = input.adaptive_avg_pool(4).unwrap();
        assert_eq!(same.to_vec(), input.to_vec());

        let ones = Tensor::full(&[1, 1, 4, 4], 1.0f64);
        assert_eq!(ones.adaptive_avg_pool(2).unwrap().to_vec(), vec![1.0; 4]);
    }

    #[test]
    fn adaptive_pool_block_means_6x6_to_3() {
        let input = t((0..36).map(|v| v as f64).collect(), &[1, 1, 6, 6]);
        let out = input.adaptive_avg_pool(3).unwrap();
        // brute-force 2x2 block means
        let data: Vec<f64> = (0..36).map(|v| v as f64).collect();
        let mut expected = Vec::new();
        for by in 0..3 {
            for bx in 0..3 {
                let mut acc = 0.0;
                for y in 0..2 {
                    for x in 0..2 {
                        acc += data[(by * 2 + y) * 6 + (bx * 2 + x)];
                    }
                }
                expected.push(acc / 4.0);
            }
        }
        assert_eq!(out.to_vec(), expected);
    }

    #[test]
    fn adaptive_pool_out_of_range_errors() {
        let input = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        assert!(input.adaptive_avg_pool(5).is_err());
    }

    #[test]
    fn global_average_equals_mean_exactly() {
        let vals: Vec<f64> = (0..64).map(|v| (v as f64).sin()).collect();
        let input = t(vals.clone(), &[1, 1, 8, 8]);
        let pooled = input.adaptive_avg_pool(1).unwrap();
        let mean = vals.iter().sum::<f64>() / 64.0;
        assert_eq!(pooled.item(), mean);
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let input = Tensor::full(&[1, 1, 2, 2], 5.0f64);
        let out = input.upsample_bilinear(8, 8).unwrap();
        assert!(out.to_vec().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn upsample_single_point_broadcasts() {
        let input = t(vec![3.25], &[1, 1, 1, 1]);
        let out = input.upsample_bilinear(4, 5).unwrap();
        assert_eq!(out.to_vec(), vec![3.25; 20]);
    }

    #[test]
    fn upsample_corner_aligned_weights() {
        // [[0,1],[0,1]] widened to 4 columns: each row [0, 1/3, 2/3, 1]
        let input = t(vec![0.0, 1.0, 0.0, 1.0], &[1, 1, 2, 2]);
        let out = input.upsample_bilinear(2, 4).unwrap();
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (i, &v) in out.to_vec().iter().enumerate() {
            assert!((v - expect[i % 4]).abs() < 1e-12, "{v} at {i}");
        }
    }

    #[test]
    fn upsample_shrink_errors() {
        let input = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        assert!(input.upsample_bilinear(2, 4).is_err());
    }

    #[test]
    fn concat_channel_order() {
        let a = Tensor::full(&[1, 2, 2, 2], 1.0f64);
        let b = Tensor::full(&[1, 2, 2, 2], 2.0f64);
        let out = concat_channels(&[a, b]).unwrap();
        assert_eq!(out.shape(), &[1, 4, 2, 2]);
        let data = out.to_vec();
        assert!(data[..8].iter().all(|&v| v == 1.0));
        assert!(data[8..].iter().all(|&v| v == 2.0));
    }

    #[test]
    fn concat_single_is_identity_and_empty_errors() {
        let a = t((0..8).map(|v| v as f64).collect(), &[1, 2, 2, 2]);
        let out = concat_channels(std::slice::from_ref(&a)).unwrap();
        assert_eq!(out.to_vec(), a.to_vec());
        assert!(concat_channels::<f64>(&[]).is_err());
    }

    #[test]
    fn concat_spatial_mismatch_errors() {
        let a = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let b = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        assert!(concat_channels(&[a, b]).is_err());
    }

    #[test]
    fn dense_identity_zero_and_hand() {
        let x = t(vec![1.0, 2.0], &[1, 2]);
        let eye = t(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let zero_b = Tensor::<f64>::zeros(&[2]);
        assert_eq!(x.dense(&eye, &zero_b).unwrap().to_vec(), vec![1.0, 2.0]);

        let zero_w = Tensor::<f64>::zeros(&[2, 2]);
        let b = t(vec![7.0, -1.0], &[2]);
        assert_eq!(x.dense(&zero_w, &b).unwrap().to_vec(), vec![7.0, -1.0]);

        let b1 = t(vec![1.0, 1.0], &[2]);
        assert_eq!(x.dense(&eye, &b1).unwrap().to_vec(), vec![2.0, 3.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_margin() {
        let logits = Tensor::<f64>::zeros(&[1, 2]);
        let logits = Tensor::param(logits.to_vec(), &[1, 2]).unwrap();
        let loss = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!((loss.item() - (2.0f64).ln()).abs() < 1e-12);

        // huge margin on the correct class -> loss ~ 0
        let confident = t(vec![50.0, 0.0], &[1, 2]);
        let loss = softmax_cross_entropy(&confident, &[0]).unwrap();
        assert!(loss.item() >= 0.0 && loss.item() < 1e-12);

        // logits [2,0], label 0 -> ln(1 + e^-2)
        let l = t(vec![2.0, 0.0], &[1, 2]);
        let loss = softmax_cross_entropy(&l, &[0]).unwrap();
        assert!((loss.item() - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let logits = Tensor::<f64>::zeros(&[1, 2]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[2]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let probs = softmax_rows(&[1.0f64, 2.0, 3.0, -1.0, 0.0, 1.0], 3);
        for row in probs.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_cross_entropy_matches_flat() {
        // [1,2,1,2] logits with 2 pixels == [2,2] logits with 2 samples
        let spatial = t(vec![1.0, -1.0, 0.5, 2.0], &[1, 2, 1, 2]);
        let flat = t(vec![1.0, 0.5, -1.0, 2.0], &[2, 2]);
        let a = softmax_cross_entropy_spatial(&spatial, &[0, 1]).unwrap();
        let b = softmax_cross_entropy(&flat, &[0, 1]).unwrap();
        assert!((a.item() - b.item()).abs() < 1e-12);
    }
}
