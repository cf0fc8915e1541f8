//! Forward kernels and their hand-written adjoints.
//!
//! The tape in `tape.rs` records which of these ran; these functions are also
//! usable directly for inference-only code paths.

use rand::Rng;
use rayon::prelude::*;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::shape("conv2d", format!("input must be N,C,H,W, got {input:?}")));
        }
        if kernel.len() != 4 {
            return Err(Error::shape("conv2d", format!("kernel must be F,C,kh,kw, got {kernel:?}")));
        }
        if kernel[1] != input[1] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel has {} input channels but input has {}", kernel[1], input[1]),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::shape("conv2d", "stride must be at least 1"));
        }
        let span_h = input[2] + 2 * padding.0;
        let span_w = input[3] + 2 * padding.1;
        if span_h < kernel[2] || span_w < kernel[3] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {}x{} larger than padded input {span_h}x{span_w}",
                    kernel[2], kernel[3]
                ),
            ));
        }
        Ok(Self {
            channels: input[1],
            height: input[2],
            width: input[3],
            filters: kernel[0],
            kernel_h: kernel[2],
            kernel_w: kernel[3],
            stride,
            padding,
            out_h: (span_h - kernel[2]) / stride.0 + 1,
            out_w: (span_w - kernel[3]) / stride.1 + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Source coordinate for output row/col `o` and kernel offset `k`, or
    /// `None` when it lands in the zero padding.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k).checked_sub(pad)?;
        (pos < extent).then_some(pos)
    }

    fn im2col<T: Element>(&self, x: &[T]) -> Vec<T> {
        let out_len = self.out_len();
        let mut cols = vec![T::zero(); self.patch_len() * out_len];
        for c in 0..self.channels {
            let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let dst = &mut cols[row * out_len..(row + 1) * out_len];
                    for oh in 0..self.out_h {
                        let Some(ih) = Self::source(oh, ki, self.stride.0, self.padding.0, self.height)
                        else {
                            continue;
                        };
                        for ow in 0..self.out_w {
                            if let Some(iw) =
                                Self::source(ow, kj, self.stride.1, self.padding.1, self.width)
                            {
                                dst[oh * self.out_w + ow] = plane[ih * self.width + iw];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Element>(&self, cols: &[T]) -> Vec<T> {
        let out_len = self.out_len();
        let mut x = vec![T::zero(); self.in_len()];
        for c in 0..self.channels {
            let plane = &mut x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let src = &cols[row * out_len..(row + 1) * out_len];
                    for oh in 0..self.out_h {
                        let Some(ih) = Self::source(oh, ki, self.stride.0, self.padding.0, self.height)
                        else {
                            continue;
                        };
                        for ow in 0..self.out_w {
                            if let Some(iw) =
                                Self::source(ow, kj, self.stride.1, self.padding.1, self.width)
                            {
                                plane[ih * self.width + iw] = plane[ih * self.width + iw]
                                    + src[oh * self.out_w + ow];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

fn check_bias<T: Element>(bias: &Tensor<T>, filters: usize) -> Result<()> {
    if bias.shape() != [filters] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?} does not match {filters} filters", bias.shape()),
        ));
    }
    Ok(())
}

/// 2-D cross-correlation over an `N,C,H,W` batch with per-filter bias.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    check_bias(bias, g.filters)?;
    let n = input.shape()[0];
    let out_len = g.out_len();
    let mut out = vec![T::zero(); n * g.filters * out_len];
    out.par_chunks_mut(g.filters * out_len)
        .zip(input.data().par_chunks(g.in_len()))
        .for_each(|(o, x)| {
            let cols = g.im2col(x);
            T::gemm(
                g.filters,
                g.patch_len(),
                out_len,
                kernel.data(),
                false,
                &cols,
                false,
                o,
                false,
            );
            for (f, plane) in o.chunks_mut(out_len).enumerate() {
                let b = bias.data()[f];
                plane.iter_mut().for_each(|v| *v = *v + b);
            }
        });
    Tensor::new(vec![n, g.filters, g.out_h, g.out_w], out)
}

/// Adjoint of [`conv2d`]: returns `(d_input, d_kernel, d_bias)`. The input
/// gradient is skipped when `want_input` is false.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: (usize, usize),
    padding: (usize, usize),
    want_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let n = input.shape()[0];
    let out_len = g.out_len();
    if grad_out.shape() != [n, g.filters, g.out_h, g.out_w] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("gradient shape {:?}", grad_out.shape()),
        ));
    }
    let per_sample: Vec<(Option<Vec<T>>, Vec<T>)> = input
        .data()
        .par_chunks(g.in_len())
        .zip(grad_out.data().par_chunks(g.filters * out_len))
        .map(|(x, go)| {
            let cols = g.im2col(x);
            let mut dk = vec![T::zero(); g.filters * g.patch_len()];
            T::gemm(g.filters, out_len, g.patch_len(), go, false, &cols, true, &mut dk, false);
            let dx = want_input.then(|| {
                let mut dcols = vec![T::zero(); g.patch_len() * out_len];
                T::gemm(
                    g.patch_len(),
                    g.filters,
                    out_len,
                    kernel.data(),
                    true,
                    go,
                    false,
                    &mut dcols,
                    false,
                );
                g.col2im(&dcols)
            });
            (dx, dk)
        })
        .collect();

    let mut d_kernel = vec![T::zero(); g.filters * g.patch_len()];
    let mut d_input = want_input.then(|| Vec::with_capacity(input.len()));
    for (dx, dk) in per_sample {
        d_kernel.iter_mut().zip(&dk).for_each(|(a, &b)| *a = *a + b);
        if let (Some(acc), Some(dx)) = (d_input.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
    }
    let mut d_bias = vec![T::zero(); g.filters];
    for go in grad_out.data().chunks(g.filters * out_len) {
        for (f, plane) in go.chunks(out_len).enumerate() {
            d_bias[f] = d_bias[f] + plane.iter().copied().sum::<T>();
        }
    }
    Ok((
        d_input
            .map(|d| Tensor::new(input.shape().to_vec(), d))
            .transpose()?,
        Tensor::new(kernel.shape().to_vec(), d_kernel)?,
        Tensor::new(vec![g.filters], d_bias)?,
    ))
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient at exactly zero is taken as zero.
pub fn relu_backward<T: Element>(x: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(grad, |v, g| if v > T::zero() { g } else { T::zero() })
}

/// Non-overlapping `size x size` max pooling. Odd trailing rows/cols are
/// dropped. Returns the pooled tensor and, for each output element, the flat
/// index of the winning input element (first maximum on ties).
pub fn max_pool2d<T: Element>(x: &Tensor<T>, size: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("max_pool2d", format!("expected N,C,H,W, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if size == 0 || h < size || w < size {
        return Err(Error::shape(
            "max_pool2d",
            format!("window {size} does not fit a {h}x{w} map"),
        ));
    }
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + i * size * w + j * size;
                for di in 0..size {
                    for dj in 0..size {
                        let idx = base + (i * size + di) * w + j * size + dj;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub fn max_pool2d_backward<T: Element>(
    input_shape: &[usize],
    argmax: &[usize],
    grad: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad.data()) {
        d[idx] = d[idx] + g;
    }
    dx
}

/// Per-channel spatial mean: `N,C,H,W -> N,C`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("global_avg_pool", format!("expected N,C,H,W, got {s:?}")));
    }
    let area = s[2] * s[3];
    let denom = T::from_usize(area).unwrap();
    let data = x
        .data()
        .chunks(area)
        .map(|plane| plane.iter().copied().sum::<T>() / denom)
        .collect();
    Tensor::new(vec![s[0], s[1]], data)
}

pub fn global_avg_pool_backward<T: Element>(input_shape: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let area = input_shape[2] * input_shape[3];
    let denom = T::from_usize(area).unwrap();
    let mut data = Vec::with_capacity(grad.len() * area);
    for &g in grad.data() {
        data.extend(std::iter::repeat_n(g / denom, area));
    }
    Tensor::new(input_shape.to_vec(), data).expect("pooling adjoint shape")
}

/// Affine map `x W + b` for `x: N,D`, `W: D,K`, `b: K`.
pub fn dense<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(Error::shape("dense", format!("input {xs:?} vs weight {ws:?}")));
    }
    if b.shape() != [ws[1]] {
        return Err(Error::shape(
            "dense",
            format!("bias {:?} vs {} outputs", b.shape(), ws[1]),
        ));
    }
    let (n, d, k) = (xs[0], xs[1], ws[1]);
    let mut out = vec![T::zero(); n * k];
    T::gemm(n, d, k, x.data(), false, w.data(), false, &mut out, false);
    for row in out.chunks_mut(k) {
        row.iter_mut().zip(b.data()).for_each(|(v, &bb)| *v = *v + bb);
    }
    Tensor::new(vec![n, k], out)
}

/// Adjoint of [`dense`]: `(d_x, d_w, d_b)`.
pub fn dense_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[1];
    if grad.shape() != [n, k] {
        return Err(Error::shape("dense_backward", format!("gradient {:?}", grad.shape())));
    }
    let mut dx = vec![T::zero(); n * d];
    T::gemm(n, k, d, grad.data(), false, w.data(), true, &mut dx, false);
    let mut dw = vec![T::zero(); d * k];
    T::gemm(d, n, k, x.data(), true, grad.data(), false, &mut dw, false);
    let mut db = vec![T::zero(); k];
    for row in grad.data().chunks(k) {
        db.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
    }
    Ok((
        Tensor::new(vec![n, d], dx)?,
        Tensor::new(vec![d, k], dw)?,
        Tensor::new(vec![k], db)?,
    ))
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::shape("softmax", format!("expected N,K with K >= 2, got {s:?}")));
    }
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(s[1]) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / total);
    }
    Tensor::new(s.to_vec(), out)
}

/// Mean over rows of `-sum_k t_k ln(max(p_k, 1e-12))`. Targets may be soft.
pub fn cross_entropy<T: Element>(probs: &Tensor<T>, targets: &Tensor<T>) -> Result<T> {
    if probs.shape() != targets.shape() || probs.ndim() != 2 {
        return Err(Error::shape(
            "cross_entropy",
            format!("probs {:?} vs targets {:?}", probs.shape(), targets.shape()),
        ));
    }
    let floor = T::lit(PROB_FLOOR);
    let total: T = probs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &t)| {
            if t == T::zero() {
                T::zero()
            } else {
                -t * p.max(floor).min(T::one()).ln()
            }
        })
        .sum();
    Ok(total / T::from_usize(probs.shape()[0]).unwrap())
}

/// Integer-label form of [`cross_entropy`].
pub fn sparse_cross_entropy<T: Element>(probs: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let k = *probs.shape().last().unwrap_or(&0);
    cross_entropy(probs, &Tensor::one_hot(labels, k)?)
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else
/// `1/(1-rate)`.
pub fn dropout_mask<T: Element, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<Vec<T>> {
    check_dropout_rate(rate)?;
    let keep = T::lit(1.0 / (1.0 - rate));
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect())
}

pub(crate) fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// Dropout as a plain function. Inference mode and `rate == 0` return the
/// input unchanged without touching the rng.
pub fn dropout<T: Element, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<Tensor<T>> {
    check_dropout_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask: Vec<T> = dropout_mask(x.len(), rate, rng)?;
    Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
    )
}

/// Bilinear resampling of a `C,H,W` image (half-pixel centers, edge clamp).
pub fn resize_bilinear<T: Element>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.len() != 3 || out_h == 0 || out_w == 0 {
        return Err(Error::shape(
            "resize_bilinear",
            format!("expected C,H,W image and positive target, got {s:?} -> {out_h}x{out_w}"),
        ));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let axis = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let scale = inp as f64 / out as f64;
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, src - lo as f64)
    };
    let rows: Vec<_> = (0..out_h).map(|i| axis(i, out_h, h)).collect();
    let cols: Vec<_> = (0..out_w).map(|j| axis(j, out_w, w)).collect();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let d = img.data();
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let p = |y: usize, x: usize| plane[y * w + x].to_f64().unwrap();
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(T::lit(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}
