//! Forward and backward kernels.
//!
//! These are pure functions on tensors; [`super::Graph`] records them on a
//! tape, but they are also usable directly.

use std::borrow::Cow;

use super::{gemm, MaskMap, Real, Tensor};
use crate::error::{contract, Result};

/// Shape bookkeeping for a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub height: usize,
    pub width: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        contract!(
            input.len() == 3,
            "conv2d input must be [C_in, H, W], got {:?}",
            input
        );
        contract!(
            weight.len() == 4,
            "conv2d weight must be [C_out, C_in, k, k], got {:?}",
            weight
        );
        let (c_in, height, width) = (input[0], input[1], input[2]);
        let (c_out, w_in, k, k2) = (weight[0], weight[1], weight[2], weight[3]);
        contract!(
            w_in == c_in,
            "conv2d weight expects C_in = {} but input has C_in = {}",
            w_in,
            c_in
        );
        contract!(k == k2, "conv2d kernel must be square, got {}x{}", k, k2);
        contract!(k >= 1, "conv2d kernel size must be >= 1");
        contract!(stride >= 1, "conv2d stride must be >= 1");
        contract!(
            bias == [c_out],
            "conv2d bias must be [{}], got {:?}",
            c_out,
            bias
        );
        let span_h = height + 2 * pad;
        let span_w = width + 2 * pad;
        contract!(
            span_h >= k && span_w >= k,
            "conv2d kernel {} exceeds padded input {}x{}",
            k,
            span_h,
            span_w
        );
        Ok(ConvGeometry {
            c_in,
            height,
            width,
            c_out,
            kernel: k,
            stride,
            pad,
            out_height: (span_h - k) / stride + 1,
            out_width: (span_w - k) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_height * self.out_width
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds input patches into a `[C_in*k*k, H'*W']` matrix.
fn im2col<T: Real>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let n = g.out_pixels();
    let mut cols = vec![T::zero(); g.patch_len() * n];
    for c in 0..g.c_in {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_height {
                    let iy = (oy * s) as isize + ki as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let out_row = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s) as isize + kj as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a patch-gradient matrix back onto the input plane (adjoint of `im2col`).
fn col2im<T: Real>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let n = g.out_pixels();
    let mut out = vec![T::zero(); g.c_in * g.height * g.width];
    for c in 0..g.c_in {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_height {
                    let iy = (oy * s) as isize + ki as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let grad_row = &src[oy * g.out_width..(oy + 1) * g.out_width];
                    for (ox, &v) in grad_row.iter().enumerate() {
                        let ix = (ox * s) as isize + kj as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn patches<'a, T: Real>(input: &'a [T], g: &ConvGeometry) -> Cow<'a, [T]> {
    if g.is_pointwise() {
        Cow::Borrowed(input)
    } else {
        Cow::Owned(im2col(input, g))
    }
}

/// Convolution kernel shared by [`conv2d`] and the graph; optionally keeps
/// the unfolded patches for the backward pass.
pub(crate) fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
    keep_patches: bool,
) -> Result<(Tensor<T>, ConvGeometry, Option<Vec<T>>)> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), bias.shape(), stride, pad)?;
    let cols = patches(input.data(), &g);
    let n = g.out_pixels();
    let mut out = Vec::with_capacity(g.c_out * n);
    for &b in bias.data() {
        out.extend(std::iter::repeat_n(b, n));
    }
    gemm(
        g.c_out,
        g.patch_len(),
        n,
        weight.data(),
        false,
        &cols,
        false,
        &mut out,
        true,
    );
    let kept = if keep_patches && !g.is_pointwise() {
        Some(cols.into_owned())
    } else {
        None
    };
    let out = Tensor::new(vec![g.c_out, g.out_height, g.out_width], out)?;
    Ok((out, g, kept))
}

/// Cross-correlation of a `[C_in, H, W]` input with `[C_out, C_in, k, k]` weights.
///
/// Output size is `(H + 2 * pad - k) / stride + 1` rounded down; trailing
/// rows/columns that do not fit a full stride are not visited.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    conv2d_forward(input, weight, bias, stride, pad, false).map(|(out, _, _)| out)
}

/// Gradients of a convolution with respect to its three inputs.
#[derive(Clone, Debug)]
pub struct Conv2dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub(crate) fn conv2d_backward_raw<T: Real>(
    grad_out: &[T],
    input: &[T],
    saved_patches: Option<&[T]>,
    weight: &[T],
    g: &ConvGeometry,
    want_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let n = g.out_pixels();
    let kk = g.patch_len();
    let cols: Cow<'_, [T]> = match saved_patches {
        Some(c) => Cow::Borrowed(c),
        None => patches(input, g),
    };

    let mut d_weight = vec![T::zero(); g.c_out * kk];
    gemm(
        g.c_out,
        n,
        kk,
        grad_out,
        false,
        &cols,
        true,
        &mut d_weight,
        false,
    );

    let d_bias = grad_out
        .chunks_exact(n)
        .map(|row| row.iter().copied().sum())
        .collect();

    let d_input = want_input.then(|| {
        let mut d_cols = vec![T::zero(); kk * n];
        gemm(
            kk,
            g.c_out,
            n,
            weight,
            true,
            grad_out,
            false,
            &mut d_cols,
            false,
        );
        if g.is_pointwise() {
            d_cols
        } else {
            col2im(&d_cols, g)
        }
    });
    (d_input, d_weight, d_bias)
}

pub fn conv2d_backward<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Conv2dGrads<T>> {
    let bias_shape = [weight.shape().first().copied().unwrap_or(0)];
    let g = ConvGeometry::new(input.shape(), weight.shape(), &bias_shape, stride, pad)?;
    contract!(
        grad_out.shape() == [g.c_out, g.out_height, g.out_width],
        "conv2d grad_out has shape {:?}, expected [{}, {}, {}]",
        grad_out.shape(),
        g.c_out,
        g.out_height,
        g.out_width
    );
    let (d_in, d_w, d_b) =
        conv2d_backward_raw(grad_out.data(), input.data(), None, weight.data(), &g, true);
    Ok(Conv2dGrads {
        input: d_in
            .map(|d| Tensor::new(input.shape().to_vec(), d))
            .transpose()?,
        weight: Tensor::new(weight.shape().to_vec(), d_w)?,
        bias: Tensor::new(vec![g.c_out], d_b)?,
    })
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(x.shape(), |i| x.data()[i].max(T::zero()))
}

pub fn relu_backward<T: Real>(grad_out: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    contract!(
        grad_out.shape() == x.shape(),
        "relu grad_out shape {:?} differs from input shape {:?}",
        grad_out.shape(),
        x.shape()
    );
    Ok(Tensor::from_fn(x.shape(), |i| {
        if x.data()[i] > T::zero() {
            grad_out.data()[i]
        } else {
            T::zero()
        }
    }))
}

fn check_mask<T: Real>(x: &Tensor<T>, mask: &MaskMap) -> Result<(usize, usize)> {
    let (c, h, w) = x.dims3()?;
    contract!(
        mask.height() == h && mask.width() == w,
        "mask is {}x{} but features are {}x{}",
        mask.height(),
        mask.width(),
        h,
        w
    );
    Ok((c, h * w))
}

fn signed<T: Real>(v: T, m: i8) -> T {
    match m {
        1 => v,
        -1 => -v,
        _ => T::zero(),
    }
}

/// Conditional ReLU: `max(x, 0) * mask`, with the mask broadcast over channels.
pub fn c_relu_forward<T: Real>(x: &Tensor<T>, mask: &MaskMap) -> Result<Tensor<T>> {
    let (_, plane) = check_mask(x, mask)?;
    let m = mask.values();
    Ok(Tensor::from_fn(x.shape(), |i| {
        signed(x.data()[i].max(T::zero()), m[i % plane])
    }))
}

/// Gradient of [`c_relu_forward`]: `grad_out * mask` where `x > 0`, else 0.
pub fn c_relu_backward<T: Real>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    mask: &MaskMap,
) -> Result<Tensor<T>> {
    let (_, plane) = check_mask(x, mask)?;
    contract!(
        grad_out.shape() == x.shape(),
        "c_relu grad_out shape {:?} differs from input shape {:?}",
        grad_out.shape(),
        x.shape()
    );
    let m = mask.values();
    Ok(Tensor::from_fn(x.shape(), |i| {
        if x.data()[i] > T::zero() {
            signed(grad_out.data()[i], m[i % plane])
        } else {
            T::zero()
        }
    }))
}

/// Mean over the spatial extent of each channel: `[C, H, W] -> [C]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    contract!(
        h >= 1 && w >= 1,
        "global_avg_pool needs a non-empty spatial extent, got {}x{}",
        h,
        w
    );
    let area = T::from_usize(h * w).unwrap();
    let out = x
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().copied().sum::<T>() / area)
        .collect();
    Tensor::new(vec![c], out)
}

pub fn global_avg_pool_backward<T: Real>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    contract!(
        input_shape.len() == 3 && grad_out.shape() == [input_shape[0]],
        "global_avg_pool grad_out {:?} does not match input {:?}",
        grad_out.shape(),
        input_shape
    );
    let area = input_shape[1] * input_shape[2];
    contract!(area > 0, "global_avg_pool needs a non-empty spatial extent");
    let inv = T::one() / T::from_usize(area).unwrap();
    Ok(Tensor::from_fn(input_shape, |i| {
        grad_out.data()[i / area] * inv
    }))
}

fn check_targets<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    contract!(
        logits.rank() == 1 && !logits.data().is_empty(),
        "bce logits must be a non-empty vector, got shape {:?}",
        logits.shape()
    );
    contract!(
        target.shape() == logits.shape(),
        "bce target shape {:?} differs from logits shape {:?}",
        target.shape(),
        logits.shape()
    );
    if let Some((i, t)) = target
        .data()
        .iter()
        .enumerate()
        .find(|(_, &t)| t != T::zero() && t != T::one())
    {
        return Err(crate::Error::Contract(format!(
            "bce target {i} is {t:?}, expected 0 or 1"
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy over `M` independent labels, stable for large `|z|`.
pub fn bce_multilabel_loss<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    check_targets(logits, target)?;
    let m = T::from_usize(logits.numel()).unwrap();
    let total: T = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &t)| z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p())
        .sum();
    Ok(total / m)
}

/// Gradient of [`bce_multilabel_loss`] scaled by `grad_out`: `(sigmoid(z) - t) / M`.
pub fn bce_multilabel_backward<T: Real>(
    grad_out: T,
    logits: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_targets(logits, target)?;
    let scale = grad_out / T::from_usize(logits.numel()).unwrap();
    Ok(Tensor::from_fn(logits.shape(), |i| {
        (sigmoid(logits.data()[i]) - target.data()[i]) * scale
    }))
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}
