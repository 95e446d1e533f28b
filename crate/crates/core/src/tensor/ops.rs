//! Forward and backward kernels shared by the tape and the inference paths.

use super::Tensor;
use crate::error::{Error, Result};

/// Output spatial size of a convolution along one axis.
fn conv_out(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    (size + 2 * padding).checked_sub(k).map(|span| span / stride + 1)
}

/// Range of output columns whose input column `o * stride + kx - padding`
/// lands inside `[0, size)`.
fn valid_range(size: usize, out: usize, kx: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if padding > kx {
        (padding - kx).div_ceil(stride)
    } else {
        0
    };
    let hi = if size + padding > kx {
        ((size - 1 + padding - kx) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub padding: usize,
}

pub(crate) fn conv_geometry(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    input.expect_rank("conv2d", 3)?;
    weight.expect_rank("conv2d", 4)?;
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let ws = weight.shape();
    if ws[1] != c_in || ws[2] != ws[3] {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?} against weight {:?}", input.shape(), ws),
        ));
    }
    if !matches!(ws[2], 1 | 3) || stride == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("unsupported kernel {} / stride {stride}", ws[2]),
        ));
    }
    let k = ws[2];
    let (Some(ho), Some(wo)) = (conv_out(h, k, stride, padding), conv_out(w, k, stride, padding))
    else {
        return Err(Error::shape("conv2d", format!("kernel {k} larger than padded input {h}x{w}")));
    };
    Ok(ConvGeometry {
        c_in,
        h,
        w,
        c_out: ws[0],
        k,
        ho,
        wo,
        stride,
        padding,
    })
}

/// Cross-correlation of a `[C_in, H, W]` input with `[C_out, C_in, k, k]` weights.
pub fn conv2d(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv_geometry(input, weight, stride, padding)?;
    let mut out = vec![0.0; g.c_out * g.ho * g.wo];
    let x = input.values();
    let wv = weight.values();
    for co in 0..g.c_out {
        let out_c = &mut out[co * g.ho * g.wo..(co + 1) * g.ho * g.wo];
        for ci in 0..g.c_in {
            let in_c = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = valid_range(g.h, g.ho, ky, g.stride, g.padding);
                for kx in 0..g.k {
                    let wt = wv[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    if wt == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = valid_range(g.w, g.wo, kx, g.stride, g.padding);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.padding;
                        let row_in = &in_c[iy * g.w..(iy + 1) * g.w];
                        let row_out = &mut out_c[oy * g.wo..(oy + 1) * g.wo];
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - g.padding;
                            let n = ox_hi - ox_lo;
                            for (o, i) in row_out[ox_lo..ox_hi].iter_mut().zip(&row_in[ix0..ix0 + n]) {
                                *o += wt * i;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                row_out[ox] += wt * row_in[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.c_out, g.ho, g.wo], out)
}

/// Accumulates input and weight gradients of [`conv2d`].
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_in: Option<&mut [f64]>,
    mut grad_w: Option<&mut [f64]>,
) {
    for co in 0..g.c_out {
        let go_c = &grad_out[co * g.ho * g.wo..(co + 1) * g.ho * g.wo];
        for ci in 0..g.c_in {
            let in_off = ci * g.h * g.w;
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = valid_range(g.h, g.ho, ky, g.stride, g.padding);
                for kx in 0..g.k {
                    let widx = ((co * g.c_in + ci) * g.k + ky) * g.k + kx;
                    let wt = weight[widx];
                    let (ox_lo, ox_hi) = valid_range(g.w, g.wo, kx, g.stride, g.padding);
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.padding;
                        let row = in_off + iy * g.w;
                        let go_row = &go_c[oy * g.wo..(oy + 1) * g.wo];
                        for ox in ox_lo..ox_hi {
                            let ix = row + ox * g.stride + kx - g.padding;
                            let go = go_row[ox];
                            acc += go * input[ix];
                            if let Some(gi) = grad_in.as_deref_mut() {
                                gi[ix] += wt * go;
                            }
                        }
                    }
                    if let Some(gw) = grad_w.as_deref_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}

/// Adds `bias[c]` to every pixel of channel `c`.
pub fn add_channel_bias(input: &Tensor, bias: &Tensor) -> Result<Tensor> {
    input.expect_rank("add_channel_bias", 3)?;
    let (c, hw) = input.chw_split();
    if bias.numel() != c {
        return Err(Error::shape(
            "add_channel_bias",
            format!("{} biases for {c} channels", bias.numel()),
        ));
    }
    let mut out = input.values().to_vec();
    for (ch, b) in bias.values().iter().enumerate() {
        for v in &mut out[ch * hw..(ch + 1) * hw] {
            *v += b;
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Per-pixel softmax over the channel axis of a `[C, H, W]` map.
pub fn softmax_channel(input: &Tensor) -> Result<Tensor> {
    input.expect_rank("softmax_channel", 3)?;
    let (c, hw) = input.chw_split();
    if c == 0 {
        return Err(Error::shape("softmax_channel", "zero channels"));
    }
    let x = input.values();
    let mut out = vec![0.0; x.len()];
    for p in 0..hw {
        let max = (0..c).map(|ch| x[ch * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for ch in 0..c {
            let e = (x[ch * hw + p] - max).exp();
            out[ch * hw + p] = e;
            total += e;
        }
        for ch in 0..c {
            out[ch * hw + p] /= total;
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Per-pixel log-softmax over channels, stabilized by max subtraction.
pub fn log_softmax_channel(input: &Tensor) -> Result<Tensor> {
    input.expect_rank("log_softmax_channel", 3)?;
    let (c, hw) = input.chw_split();
    let x = input.values();
    let mut out = vec![0.0; x.len()];
    for p in 0..hw {
        let max = (0..c).map(|ch| x[ch * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..c).map(|ch| (x[ch * hw + p] - max).exp()).sum::<f64>().ln();
        for ch in 0..c {
            out[ch * hw + p] = x[ch * hw + p] - lse;
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("lengths {} and {}", a.len(), b.len()),
        ));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateFeature);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Unit-length copy of `a`.
pub fn normalized(a: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(a);
    if n == 0.0 {
        return Err(Error::DegenerateFeature);
    }
    Ok(a.iter().map(|v| v / n).collect())
}

/// `y[o, p] = sum_i w[o, i] * x[i, p] + b[o]` for a `[C_in, H, W]` map.
pub fn linear_channels(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    input.expect_rank("linear_channels", 3)?;
    weight.expect_rank("linear_channels", 2)?;
    let (c_in, hw) = input.chw_split();
    let (c_out, w_in) = (weight.shape()[0], weight.shape()[1]);
    if w_in != c_in || bias.numel() != c_out {
        return Err(Error::shape(
            "linear_channels",
            format!("input {:?}, weight {:?}, bias {:?}", input.shape(), weight.shape(), bias.shape()),
        ));
    }
    let x = input.values();
    let w = weight.values();
    let mut out = vec![0.0; c_out * hw];
    for o in 0..c_out {
        let row = &mut out[o * hw..(o + 1) * hw];
        row.fill(bias.values()[o]);
        for i in 0..c_in {
            let wt = w[o * c_in + i];
            if wt == 0.0 {
                continue;
            }
            for (r, v) in row.iter_mut().zip(&x[i * hw..(i + 1) * hw]) {
                *r += wt * v;
            }
        }
    }
    Tensor::new(vec![c_out, input.shape()[1], input.shape()[2]], out)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank("matmul", 2)?;
    b.expect_rank("matmul", 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.values()[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b.values()[p * n + j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Index of the smallest value; ties go to the lowest index.
pub fn argmin(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}
