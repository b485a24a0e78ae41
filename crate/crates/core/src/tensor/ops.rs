use serde::{Deserialize, Serialize};

use super::{pairwise_sum, Tensor};
use crate::error::{Error, Result};

/// Epsilon added to the variance inside every normalization layer.
pub const BN_EPS: f64 = 1e-5;
/// Weight on the previous running statistic in the EMA update.
pub const BN_MOMENTUM: f64 = 0.9;

fn out_extent(len: usize, k: usize, stride: usize, padding: usize, axis: &str) -> Result<usize> {
    let padded = len + 2 * padding;
    if padded < k {
        return Err(Error::shape(format!(
            "{axis}: padded extent {padded} is smaller than kernel {k}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Output indices `o` in `[start, end)` whose input tap `o*stride + offset - padding`
/// falls inside `[0, in_len)`.
fn valid_range(
    offset: usize,
    padding: usize,
    stride: usize,
    in_len: usize,
    out_len: usize,
) -> (usize, usize) {
    let start = if padding > offset {
        (padding - offset).div_ceil(stride)
    } else {
        0
    };
    let end = if in_len + padding > offset {
        ((in_len - 1 + padding - offset) / stride + 1).min(out_len)
    } else {
        0
    };
    (start, end.max(start))
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

fn conv_geometry(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    let (c_in, h, w) = input.dims3()?;
    let (c_out, wc_in, k) = match weight.shape()[..] {
        [co, ci, kh, kw] if kh == kw => (co, ci, kh),
        [_, _, kh, kw] => {
            return Err(Error::shape(format!(
                "conv2d weight: kernel height {kh} != kernel width {kw}"
            )))
        }
        _ => {
            return Err(Error::shape(format!(
                "conv2d weight must be [C_out,C_in,k,k], got {:?}",
                weight.shape()
            )))
        }
    };
    if k % 2 == 0 {
        return Err(Error::shape(format!("conv2d kernel size {k} must be odd")));
    }
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "conv2d C_in: input has {c_in} channels, weight expects {wc_in}"
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be >= 1"));
    }
    let oh = out_extent(h, k, stride, padding, "conv2d H")?;
    let ow = out_extent(w, k, stride, padding, "conv2d W")?;
    Ok(ConvGeom {
        c_in,
        h,
        w,
        c_out,
        k,
        oh,
        ow,
        stride,
        padding,
    })
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = conv_geometry(input, weight, stride, padding)?;
    if bias.shape() != [g.c_out] {
        return Err(Error::shape(format!(
            "conv2d bias: expected [{}], got {:?}",
            g.c_out,
            bias.shape()
        )));
    }
    let x = input.data();
    let wt = weight.data();
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = vec![0.0; g.c_out * plane_out];
    for co in 0..g.c_out {
        let out_c = &mut out[co * plane_out..(co + 1) * plane_out];
        out_c.fill(bias.data()[co]);
        for ci in 0..g.c_in {
            let in_c = &x[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..g.k {
                let (oy0, oy1) = valid_range(ky, g.padding, g.stride, g.h, g.oh);
                for kx in 0..g.k {
                    let wv = wt[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    let (ox0, ox1) = valid_range(kx, g.padding, g.stride, g.w, g.ow);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let in_row = &in_c[iy * g.w..(iy + 1) * g.w];
                        let out_row = &mut out_c[oy * g.ow..(oy + 1) * g.ow];
                        for ox in ox0..ox1 {
                            out_row[ox] += wv * in_row[ox * g.stride + kx - g.padding];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[g.c_out, g.oh, g.ow], out)
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Conv2dGrads> {
    let g = conv_geometry(input, weight, stride, padding)?;
    if grad_out.shape() != [g.c_out, g.oh, g.ow] {
        return Err(Error::shape(format!(
            "conv2d_backward grad_out: expected {:?}, got {:?}",
            [g.c_out, g.oh, g.ow],
            grad_out.shape()
        )));
    }
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; g.c_out];
    for co in 0..g.c_out {
        let go_c = &go[co * plane_out..(co + 1) * plane_out];
        gb[co] = pairwise_sum(go_c);
        for ci in 0..g.c_in {
            let in_c = &x[ci * plane_in..(ci + 1) * plane_in];
            let gx_c = &mut gx[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..g.k {
                let (oy0, oy1) = valid_range(ky, g.padding, g.stride, g.h, g.oh);
                for kx in 0..g.k {
                    let widx = ((co * g.c_in + ci) * g.k + ky) * g.k + kx;
                    let wv = wt[widx];
                    let (ox0, ox1) = valid_range(kx, g.padding, g.stride, g.w, g.ow);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let go_row = &go_c[oy * g.ow..(oy + 1) * g.ow];
                        for ox in ox0..ox1 {
                            let ix = iy * g.w + ox * g.stride + kx - g.padding;
                            acc += go_row[ox] * in_c[ix];
                            gx_c[ix] += go_row[ox] * wv;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: Tensor::from_vec(input.shape(), gx)?,
        weight: Tensor::from_vec(weight.shape(), gw)?,
        bias: Tensor::from_vec(&[g.c_out], gb)?,
    })
}

fn linear_dims(input: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    let (c_out, c_in) = match weight.shape()[..] {
        [co, ci] => (co, ci),
        _ => {
            return Err(Error::shape(format!(
                "linear weight must be [C_out,C_in], got {:?}",
                weight.shape()
            )))
        }
    };
    let last = *input.shape().last().unwrap_or(&0);
    if last != c_in {
        return Err(Error::shape(format!(
            "linear C_in: input trailing axis is {last}, weight expects {c_in}"
        )));
    }
    Ok((input.len() / c_in, c_in, c_out))
}

/// Affine map over the trailing axis.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, c_in, c_out) = linear_dims(input, weight)?;
    if bias.shape() != [c_out] {
        return Err(Error::shape(format!(
            "linear bias: expected [{c_out}], got {:?}",
            bias.shape()
        )));
    }
    let x = input.data();
    let w = weight.data();
    let mut out = Vec::with_capacity(rows * c_out);
    for r in 0..rows {
        let xr = &x[r * c_in..(r + 1) * c_in];
        for o in 0..c_out {
            let wr = &w[o * c_in..(o + 1) * c_in];
            out.push(bias.data()[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = c_out;
    Tensor::from_vec(&shape, out)
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn linear_backward(grad_out: &Tensor, input: &Tensor, weight: &Tensor) -> Result<LinearGrads> {
    let (rows, c_in, c_out) = linear_dims(input, weight)?;
    if grad_out.len() != rows * c_out || grad_out.shape().last() != Some(&c_out) {
        return Err(Error::shape(format!(
            "linear_backward grad_out: expected {rows}x{c_out}, got {:?}",
            grad_out.shape()
        )));
    }
    let x = input.data();
    let w = weight.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; c_out];
    for r in 0..rows {
        let xr = &x[r * c_in..(r + 1) * c_in];
        let gxr = &mut gx[r * c_in..(r + 1) * c_in];
        for o in 0..c_out {
            let g = go[r * c_out + o];
            gb[o] += g;
            let wr = &w[o * c_in..(o + 1) * c_in];
            let gwr = &mut gw[o * c_in..(o + 1) * c_in];
            for i in 0..c_in {
                gxr[i] += g * wr[i];
                gwr[i] += g * xr[i];
            }
        }
    }
    Ok(LinearGrads {
        input: Tensor::from_vec(input.shape(), gx)?,
        weight: Tensor::from_vec(weight.shape(), gw)?,
        bias: Tensor::from_vec(&[c_out], gb)?,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    grad_out.same_shape(input, "relu_backward")?;
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsMode {
    #[default]
    Batch,
    Running,
}

/// Per-channel exponential moving averages of mean and variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running <- momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    Batch,
    Running(&'a RunningStats),
}

impl NormStats<'_> {
    pub fn mode(&self) -> StatsMode {
        match self {
            NormStats::Batch => StatsMode::Batch,
            NormStats::Running(_) => StatsMode::Running,
        }
    }
}

/// Forward state retained for [`norm_act_backward`].
#[derive(Clone, Debug)]
pub struct NormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    active: Vec<bool>,
    mode: StatsMode,
    /// Statistics of the supplied tensor (also computed in running mode).
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct NormActGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Per-channel normalization over every non-channel position, affine, then ReLU.
///
/// Input is `[C, ...]`; statistics are taken over the trailing axes.
pub fn norm_act(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: NormStats<'_>,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!(
            "norm_act eps must be > 0, got {eps}"
        )));
    }
    let c = input.shape()[0];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "norm_act affine: expected [{c}], got gamma {:?} beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if let NormStats::Running(rs) = stats {
        if rs.mean.len() != c || rs.var.len() != c {
            return Err(Error::shape(format!(
                "norm_act running stats: expected {c} channels, got {}",
                rs.mean.len()
            )));
        }
    }
    let n = input.len() / c;
    let mut out = vec![0.0; input.len()];
    let mut xhat = vec![0.0; input.len()];
    let mut active = vec![false; input.len()];
    let mut inv_std = vec![0.0; c];
    let mut batch_mean = vec![0.0; c];
    let mut batch_var = vec![0.0; c];
    for ch in 0..c {
        let xs = input.channel(ch);
        let mean = pairwise_sum(xs) / n as f64;
        let sq: Vec<f64> = xs.iter().map(|v| (v - mean) * (v - mean)).collect();
        let var = pairwise_sum(&sq) / n as f64;
        batch_mean[ch] = mean;
        batch_var[ch] = var;
        let (m, v) = match stats {
            NormStats::Batch => (mean, var),
            NormStats::Running(rs) => (rs.mean[ch], rs.var[ch]),
        };
        let is = 1.0 / (v + eps).sqrt();
        inv_std[ch] = is;
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for (i, &x) in xs.iter().enumerate() {
            let idx = ch * n + i;
            let xh = (x - m) * is;
            xhat[idx] = xh;
            let z = g * xh + b;
            if z > 0.0 {
                out[idx] = z;
                active[idx] = true;
            }
        }
    }
    let cache = NormCache {
        xhat: Tensor::from_vec(input.shape(), xhat)?,
        inv_std,
        active,
        mode: stats.mode(),
        batch_mean,
        batch_var,
    };
    Ok((Tensor::from_vec(input.shape(), out)?, cache))
}

pub fn norm_act_backward(
    grad_out: &Tensor,
    cache: &NormCache,
    gamma: &Tensor,
) -> Result<NormActGrads> {
    grad_out.same_shape(&cache.xhat, "norm_act_backward grad_out")?;
    let c = grad_out.shape()[0];
    let n = grad_out.len() / c;
    let mut gx = vec![0.0; grad_out.len()];
    let mut gg = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    let go = grad_out.data();
    let xh = cache.xhat.data();
    for ch in 0..c {
        let range = ch * n..(ch + 1) * n;
        let dz: Vec<f64> = range
            .clone()
            .map(|i| if cache.active[i] { go[i] } else { 0.0 })
            .collect();
        let dz_xhat: Vec<f64> = dz
            .iter()
            .zip(&xh[range.clone()])
            .map(|(a, b)| a * b)
            .collect();
        let sum_dz = pairwise_sum(&dz);
        let sum_dz_xhat = pairwise_sum(&dz_xhat);
        gbeta[ch] = sum_dz;
        gg[ch] = sum_dz_xhat;
        let g = gamma.data()[ch];
        let is = cache.inv_std[ch];
        match cache.mode {
            StatsMode::Batch => {
                let nf = n as f64;
                for (k, i) in range.enumerate() {
                    gx[i] = g * is / nf * (nf * dz[k] - sum_dz - xh[i] * sum_dz_xhat);
                }
            }
            StatsMode::Running => {
                for (k, i) in range.enumerate() {
                    gx[i] = g * is * dz[k];
                }
            }
        }
    }
    Ok(NormActGrads {
        input: Tensor::from_vec(grad_out.shape(), gx)?,
        gamma: Tensor::from_vec(&[c], gg)?,
        beta: Tensor::from_vec(&[c], gbeta)?,
    })
}

/// Average pooling with window = stride = `window`; edge windows average over
/// the pixels that exist, so the output extent is `ceil(len / window)`.
pub fn avg_pool2d(input: &Tensor, window: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if window == 0 {
        return Err(Error::invalid("avg_pool2d window must be >= 1"));
    }
    let (oh, ow) = (h.div_ceil(window), w.div_ceil(window));
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = input.channel(ch);
        for oy in 0..oh {
            let ys = oy * window..((oy + 1) * window).min(h);
            for ox in 0..ow {
                let xs = ox * window..((ox + 1) * window).min(w);
                let mut vals = Vec::with_capacity(window * window);
                for y in ys.clone() {
                    vals.extend_from_slice(&plane[y * w + xs.start..y * w + xs.end]);
                }
                out[(ch * oh + oy) * ow + ox] = pairwise_sum(&vals) / vals.len() as f64;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

pub fn avg_pool2d_backward(
    grad_out: &Tensor,
    input_shape: &[usize],
    window: usize,
) -> Result<Tensor> {
    let (c, h, w) = match input_shape[..] {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::shape(
                "avg_pool2d_backward needs a [C,H,W] input shape",
            ))
        }
    };
    let (oh, ow) = (h.div_ceil(window), w.div_ceil(window));
    if grad_out.shape() != [c, oh, ow] {
        return Err(Error::shape(format!(
            "avg_pool2d_backward grad_out: expected {:?}, got {:?}",
            [c, oh, ow],
            grad_out.shape()
        )));
    }
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let oy = y / window;
            let wy = ((oy + 1) * window).min(h) - oy * window;
            for x in 0..w {
                let ox = x / window;
                let wx = ((ox + 1) * window).min(w) - ox * window;
                gx[(ch * h + y) * w + x] =
                    grad_out.data()[(ch * oh + oy) * ow + ox] / (wy * wx) as f64;
            }
        }
    }
    Tensor::from_vec(input_shape, gx)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be >= 1"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[(ch * oh + y) * ow + x] = input.data()[(ch * h + y / factor) * w + x / factor];
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

pub fn upsample_nearest_backward(grad_out: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, oh, ow) = grad_out.dims3()?;
    if factor == 0 || oh % factor != 0 || ow % factor != 0 {
        return Err(Error::shape(format!(
            "upsample_nearest_backward: {:?} not divisible by factor {factor}",
            grad_out.shape()
        )));
    }
    let (h, w) = (oh / factor, ow / factor);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                gx[(ch * h + y / factor) * w + x / factor] +=
                    grad_out.data()[(ch * oh + y) * ow + x];
            }
        }
    }
    Tensor::from_vec(&[c, h, w], gx)
}
