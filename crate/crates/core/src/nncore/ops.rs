//! Forward and backward kernels.
//!
//! Convolutions operate on `(N, C, H, W)` batches; the public entry points
//! also accept a single `(C, H, W)` image. Every backward function returns the
//! exact reverse-mode gradient of its forward partner.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Batch-norm variance epsilon.
pub const BN_EPSILON: f64 = 1e-3;
/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output extent `ceil(n / stride)`; odd padding puts the extra zero on
    /// the high-index side.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Output extent and low-side padding along one axis.
pub fn out_extent(n: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if stride == 0 || k == 0 {
        return Err(Error::Shape("stride and kernel size must be positive".into()));
    }
    match padding {
        Padding::Same => {
            let out = n.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(n);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if n < k {
                return Err(Error::Shape(format!(
                    "valid convolution with kernel {k} on extent {n}"
                )));
            }
            Ok(((n - k) / stride + 1, 0))
        }
    }
}

/// Output indices `o` for which `o * stride + offset - pad` lands in `[0, len)`.
fn valid_range(out: usize, len: usize, offset: usize, pad: usize, stride: usize) -> (usize, usize) {
    if len + pad <= offset {
        return (0, 0);
    }
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    let hi = ((len + pad - offset - 1) / stride + 1).min(out);
    (lo.min(hi), hi)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    /// Input channels seen by each output channel (1 for depthwise).
    cin_per_group: usize,
    groups: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    fn in_channel(&self, co: usize, local: usize) -> usize {
        let out_per_group = self.cout / self.groups;
        (co / out_per_group) * self.cin_per_group + local
    }

    fn kernel_index(&self, co: usize, local: usize, ky: usize, kx: usize) -> usize {
        ((co * self.cin_per_group + local) * self.kh + ky) * self.kw + kx
    }

    fn out_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.n, self.cout, self.oh, self.ow]
        } else {
            vec![self.cout, self.oh, self.ow]
        }
    }
}

fn batch_dims(x: &Tensor, what: &str) -> Result<([usize; 4], bool)> {
    match *x.shape() {
        [n, c, h, w] => Ok(([n, c, h, w], true)),
        [c, h, w] => Ok(([1, c, h, w], false)),
        ref s => Err(Error::Shape(format!("{what} expects (N,C,H,W) or (C,H,W), got {s:?}"))),
    }
}

fn conv_geom(
    x: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: Padding,
    depthwise: bool,
) -> Result<(ConvGeom, bool)> {
    let ([n, cin, h, w], batched) = batch_dims(x, "convolution")?;
    let (cout, cin_per_group, kh, kw) = if depthwise {
        match *kernels.shape() {
            [c, kh, kw] if c == cin => (c, 1, kh, kw),
            ref s => {
                return Err(Error::Shape(format!(
                    "depthwise kernels {s:?} do not match {cin} input channels"
                )))
            }
        }
    } else {
        match *kernels.shape() {
            [co, ci, kh, kw] if ci == cin => (co, ci, kh, kw),
            ref s => {
                return Err(Error::Shape(format!(
                    "kernels {s:?} do not match {cin} input channels"
                )))
            }
        }
    };
    let (oh, pad_top) = out_extent(h, kh, stride, padding)?;
    let (ow, pad_left) = out_extent(w, kw, stride, padding)?;
    let geom = ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        cin_per_group,
        groups: if depthwise { cin } else { 1 },
        kh,
        kw,
        stride,
        oh,
        ow,
        pad_top,
        pad_left,
    };
    Ok((geom, batched))
}

/// `c = a * b + beta * c` for row-major `a: (m, k)`, `b: (k, n)`; `trans_*`
/// reads the operand as the transpose of a row-major buffer.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the m x k, k x n and m x n index ranges
    // addressed by these strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn conv_forward_raw(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.cout * plane_out];
    if g.is_pointwise() && g.groups == 1 {
        for n in 0..g.n {
            let xin = &x[n * g.cin * plane_in..][..g.cin * plane_in];
            let o = &mut out[n * g.cout * plane_out..][..g.cout * plane_out];
            gemm(g.cout, g.cin, plane_in, k, false, xin, false, 0.0, o);
        }
        return out;
    }
    for n in 0..g.n {
        for co in 0..g.cout {
            let o = &mut out[(n * g.cout + co) * plane_out..][..plane_out];
            for local in 0..g.cin_per_group {
                let ci = g.in_channel(co, local);
                let xin = &x[(n * g.cin + ci) * plane_in..][..plane_in];
                if g.is_pointwise() {
                    let wv = k[g.kernel_index(co, local, 0, 0)];
                    for (ov, xv) in o.iter_mut().zip(xin) {
                        *ov += wv * xv;
                    }
                    continue;
                }
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(g.oh, g.h, ky, g.pad_top, g.stride);
                    for kx in 0..g.kw {
                        let wv = k[g.kernel_index(co, local, ky, kx)];
                        let (ox_lo, ox_hi) = valid_range(g.ow, g.w, kx, g.pad_left, g.stride);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad_top;
                            let row = &xin[iy * g.w..][..g.w];
                            let orow = &mut o[oy * g.ow..][..g.ow];
                            if g.stride == 1 {
                                let off = ox_lo + kx - g.pad_left;
                                let len = ox_hi - ox_lo;
                                for (ov, xv) in orow[ox_lo..ox_hi].iter_mut().zip(&row[off..off + len])
                                {
                                    *ov += wv * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    orow[ox] += wv * row[ox * g.stride + kx - g.pad_left];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_kernels)`; the input gradient is skipped when
/// `need_input` is false.
fn conv_backward_raw(
    x: &[f64],
    k: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>) {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut dx = if need_input {
        Some(vec![0.0; x.len()])
    } else {
        None
    };
    let mut dk = vec![0.0; k.len()];
    if g.is_pointwise() && g.groups == 1 {
        for n in 0..g.n {
            let xin = &x[n * g.cin * plane_in..][..g.cin * plane_in];
            let d = &dy[n * g.cout * plane_out..][..g.cout * plane_out];
            // dK += dY . X^T ; dX = K^T . dY
            gemm(g.cout, plane_in, g.cin, d, false, xin, true, 1.0, &mut dk);
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx[n * g.cin * plane_in..][..g.cin * plane_in];
                gemm(g.cin, g.cout, plane_in, k, true, d, false, 0.0, dxn);
            }
        }
        return (dx, dk);
    }
    for n in 0..g.n {
        for co in 0..g.cout {
            let d = &dy[(n * g.cout + co) * plane_out..][..plane_out];
            for local in 0..g.cin_per_group {
                let ci = g.in_channel(co, local);
                let x_off = (n * g.cin + ci) * plane_in;
                let xin = &x[x_off..][..plane_in];
                if g.is_pointwise() {
                    let ki = g.kernel_index(co, local, 0, 0);
                    dk[ki] += d.iter().zip(xin).map(|(a, b)| a * b).sum::<f64>();
                    if let Some(dx) = dx.as_mut() {
                        let wv = k[ki];
                        for (dv, gv) in dx[x_off..][..plane_in].iter_mut().zip(d) {
                            *dv += wv * gv;
                        }
                    }
                    continue;
                }
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(g.oh, g.h, ky, g.pad_top, g.stride);
                    for kx in 0..g.kw {
                        let ki = g.kernel_index(co, local, ky, kx);
                        let wv = k[ki];
                        let (ox_lo, ox_hi) = valid_range(g.ow, g.w, kx, g.pad_left, g.stride);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad_top;
                            let row = &xin[iy * g.w..][..g.w];
                            let drow = &d[oy * g.ow..][..g.ow];
                            if g.stride == 1 {
                                let off = ox_lo + kx - g.pad_left;
                                let len = ox_hi - ox_lo;
                                acc += drow[ox_lo..ox_hi]
                                    .iter()
                                    .zip(&row[off..off + len])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                                if let Some(dx) = dx.as_mut() {
                                    let dxrow = &mut dx[x_off + iy * g.w..][..g.w];
                                    for (dv, gv) in
                                        dxrow[off..off + len].iter_mut().zip(&drow[ox_lo..ox_hi])
                                    {
                                        *dv += wv * gv;
                                    }
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * g.stride + kx - g.pad_left;
                                    acc += drow[ox] * row[ix];
                                    if let Some(dx) = dx.as_mut() {
                                        dx[x_off + iy * g.w + ix] += wv * drow[ox];
                                    }
                                }
                            }
                        }
                        dk[ki] += acc;
                    }
                }
            }
        }
    }
    (dx, dk)
}

fn check_grad_shape(dy: &Tensor, expected: &[usize], what: &str) -> Result<()> {
    if dy.shape() != expected {
        return Err(Error::Shape(format!(
            "{what}: upstream gradient {:?}, expected {expected:?}",
            dy.shape()
        )));
    }
    Ok(())
}

/// Standard 2-D convolution (cross-correlation), kernels `(C_out, C_in, kh, kw)`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let (g, batched) = conv_geom(input, kernels, stride, padding, false)?;
    Tensor::new(g.out_shape(batched), conv_forward_raw(input.data(), kernels.data(), &g))
}

pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let (g, batched) = conv_geom(input, kernels, stride, padding, false)?;
    check_grad_shape(grad_out, &g.out_shape(batched), "conv2d")?;
    let (dx, dk) = conv_backward_raw(input.data(), kernels.data(), grad_out.data(), &g, need_input);
    let dx = dx.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?;
    Ok((dx, Tensor::new(kernels.shape().to_vec(), dk)?))
}

/// Per-channel 2-D convolution, kernels `(C, kh, kw)`.
pub fn depthwise_conv2d(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let (g, batched) = conv_geom(input, kernels, stride, padding, true)?;
    Tensor::new(g.out_shape(batched), conv_forward_raw(input.data(), kernels.data(), &g))
}

pub fn depthwise_conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let (g, batched) = conv_geom(input, kernels, stride, padding, true)?;
    check_grad_shape(grad_out, &g.out_shape(batched), "depthwise_conv2d")?;
    let (dx, dk) = conv_backward_raw(input.data(), kernels.data(), grad_out.data(), &g, need_input);
    let dx = dx.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?;
    Ok((dx, Tensor::new(kernels.shape().to_vec(), dk)?))
}

fn conv1d_as_2d(input: &Tensor, kernels: &Tensor) -> Result<(Tensor, Tensor, bool)> {
    let (x4, batched) = match *input.shape() {
        [n, c, l] => (input.clone().reshape(&[n, c, 1, l])?, true),
        [c, l] => (input.clone().reshape(&[1, c, 1, l])?, false),
        ref s => return Err(Error::Shape(format!("conv1d expects (N,C,L) or (C,L), got {s:?}"))),
    };
    let k4 = match *kernels.shape() {
        [co, ci, k] => kernels.clone().reshape(&[co, ci, 1, k])?,
        ref s => return Err(Error::Shape(format!("conv1d kernels must be (C_out,C_in,k), got {s:?}"))),
    };
    Ok((x4, k4, batched))
}

fn check_bias(bias: Option<&Tensor>, cout: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [cout] => Err(Error::Shape(format!(
            "bias {:?} does not match {cout} output channels",
            b.shape()
        ))),
        _ => Ok(()),
    }
}

/// Stride-1, same-padded 1-D convolution with optional bias.
/// `(N, C_in, L)` or `(C_in, L)` in, kernels `(C_out, C_in, k)`.
pub fn conv1d(input: &Tensor, kernels: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (x4, k4, batched) = conv1d_as_2d(input, kernels)?;
    let cout = kernels.shape()[0];
    check_bias(bias, cout)?;
    let y = conv2d(&x4, &k4, 1, Padding::Same)?;
    let (n, l) = (y.shape()[0], y.shape()[3]);
    let mut data = y.into_data();
    if let Some(b) = bias {
        for (i, chunk) in data.chunks_mut(l).enumerate() {
            let bv = b.data()[i % cout];
            for v in chunk {
                *v += bv;
            }
        }
    }
    let shape = if batched { vec![n, cout, l] } else { vec![cout, l] };
    Tensor::new(shape, data)
}

/// Returns `(grad_input, grad_kernels, grad_bias)`.
pub fn conv1d_backward(
    input: &Tensor,
    kernels: &Tensor,
    bias: Option<&Tensor>,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Option<Tensor>)> {
    let (x4, k4, batched) = conv1d_as_2d(input, kernels)?;
    let cout = kernels.shape()[0];
    check_bias(bias, cout)?;
    let l = *input.shape().last().unwrap();
    let n = if batched { input.shape()[0] } else { 1 };
    let expected: Vec<usize> = if batched { vec![n, cout, l] } else { vec![cout, l] };
    check_grad_shape(grad_out, &expected, "conv1d")?;
    let dy4 = grad_out.clone().reshape(&[n, cout, 1, l])?;
    let (dx, dk) = conv2d_backward(&x4, &k4, 1, Padding::Same, &dy4, need_input)?;
    let db = bias.map(|_| {
        let mut db = vec![0.0; cout];
        for (i, chunk) in grad_out.data().chunks(l).enumerate() {
            db[i % cout] += chunk.iter().sum::<f64>();
        }
        Tensor::new(vec![cout], db)
    });
    let dx = dx.map(|d| d.reshape(input.shape())).transpose()?;
    Ok((dx, dk.reshape(kernels.shape())?, db.transpose()?))
}

/// Statistics kept from a training-mode batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn bn_dims(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    let ([n, c, h, w], _) = batch_dims(x, "batchnorm")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "batchnorm over {c} channels got gamma {:?}, beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok((n, c, h * w))
}

/// Batch norm with batch statistics over `(N, H, W)` (biased variance).
pub fn batchnorm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, BnCache)> {
    let (n, c, plane) = bn_dims(x, gamma, beta)?;
    let count = (n * plane) as f64;
    let data = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            mean[ch] += data[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for b in 0..n {
        for ch in 0..c {
            let m = mean[ch];
            var[ch] += data[(b * c + ch) * plane..][..plane]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();

    let mut xhat = vec![0.0; data.len()];
    let mut out = vec![0.0; data.len()];
    for b in 0..n {
        for ch in 0..c {
            let (m, s, g, be) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let xh = (data[i] - m) * s;
                xhat[i] = xh;
                out[i] = g * xh + be;
            }
        }
    }
    let cache = BnCache {
        xhat,
        inv_std,
        mean,
        var,
    };
    Ok((Tensor::new(x.shape().to_vec(), out)?, cache))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_train_backward(
    grad_out: &Tensor,
    gamma: &Tensor,
    cache: &BnCache,
) -> Result<(Tensor, Tensor, Tensor)> {
    let ([n, c, h, w], _) = batch_dims(grad_out, "batchnorm backward")?;
    let plane = h * w;
    if cache.xhat.len() != grad_out.numel() || gamma.shape() != [c] {
        return Err(Error::Shape("batchnorm backward: cache does not match gradient".into()));
    }
    let dy = grad_out.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dbeta[ch] += dy[i];
                dgamma[ch] += dy[i] * cache.xhat[i];
            }
        }
    }
    let count = (n * plane) as f64;
    let mut dx = vec![0.0; dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma.data()[ch] * cache.inv_std[ch] / count;
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dx[i] = scale * (count * dy[i] - dbeta[ch] - cache.xhat[i] * dgamma[ch]);
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

fn check_running(c: usize, mean: &[f64], var: &[f64]) -> Result<()> {
    if mean.len() != c || var.len() != c {
        return Err(Error::Shape(format!(
            "running statistics have lengths ({}, {}), expected {c}",
            mean.len(),
            var.len()
        )));
    }
    Ok(())
}

/// Batch norm with fixed running statistics.
pub fn batchnorm_infer(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
) -> Result<Tensor> {
    let (n, c, plane) = bn_dims(x, gamma, beta)?;
    check_running(c, running_mean, running_var)?;
    let mut out = x.data().to_vec();
    for b in 0..n {
        for ch in 0..c {
            let s = gamma.data()[ch] / (running_var[ch] + BN_EPSILON).sqrt();
            let shift = beta.data()[ch] - running_mean[ch] * s;
            for v in &mut out[(b * c + ch) * plane..][..plane] {
                *v = *v * s + shift;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Returns `(grad_input, grad_gamma, grad_beta)` for [`batchnorm_infer`].
pub fn batchnorm_infer_backward(
    x: &Tensor,
    gamma: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let ([n, c, h, w], _) = batch_dims(x, "batchnorm backward")?;
    let plane = h * w;
    check_running(c, running_mean, running_var)?;
    check_grad_shape(grad_out, x.shape(), "batchnorm")?;
    let (xd, dy) = (x.data(), grad_out.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (running_var[ch] + BN_EPSILON).sqrt();
            let s = gamma.data()[ch] * inv;
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dx[i] = dy[i] * s;
                dbeta[ch] += dy[i];
                dgamma[ch] += dy[i] * (xd[i] - running_mean[ch]) * inv;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

/// Exponential moving average of batch statistics:
/// `running = momentum * running + (1 - momentum) * batch`.
pub fn update_running_stats(
    running_mean: &mut [f64],
    running_var: &mut [f64],
    cache: &BnCache,
    momentum: f64,
) {
    for (r, b) in running_mean.iter_mut().zip(&cache.mean) {
        *r = momentum * *r + (1.0 - momentum) * b;
    }
    for (r, b) in running_var.iter_mut().zip(&cache.var) {
        *r = momentum * *r + (1.0 - momentum) * b;
    }
}

/// Public batch norm: train mode normalizes with batch statistics and
/// folds them into the running estimates; infer mode uses the running ones.
pub fn batchnorm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &mut [f64],
    running_var: &mut [f64],
    mode: Mode,
    momentum: f64,
) -> Result<Tensor> {
    match mode {
        Mode::Train => {
            let (y, cache) = batchnorm_train(x, gamma, beta)?;
            check_running(gamma.numel(), running_mean, running_var)?;
            update_running_stats(running_mean, running_var, &cache, momentum);
            Ok(y)
        }
        Mode::Infer => batchnorm_infer(x, gamma, beta, running_mean, running_var),
    }
}

pub fn relu6(x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| x.data()[i].clamp(0.0, 6.0))
}

/// Gradient passes where `0 < x < 6`.
pub fn relu6_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    check_grad_shape(grad_out, x.shape(), "relu6")?;
    Ok(Tensor::from_fn(x.shape(), |i| {
        let v = x.data()[i];
        if v > 0.0 && v < 6.0 {
            grad_out.data()[i]
        } else {
            0.0
        }
    }))
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

/// Global average pooling over one axis; the axis is removed.
pub fn gap_over_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for a in 0..len {
            let src = &x.data()[(o * len + a) * inner..][..inner];
            for (d, s) in out[o * inner..][..inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let scale = 1.0 / len as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    Tensor::new(reduced_shape(x.shape(), axis), out)
}

/// Spreads `g / len` back over the pooled axis.
pub fn gap_over_axis_backward(input_shape: &[usize], axis: usize, grad_out: &Tensor) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(input_shape, axis)?;
    check_grad_shape(grad_out, &reduced_shape(input_shape, axis), "gap")?;
    let scale = 1.0 / len as f64;
    let mut dx = vec![0.0; outer * len * inner];
    for o in 0..outer {
        let g = &grad_out.data()[o * inner..][..inner];
        for a in 0..len {
            for (d, gv) in dx[(o * len + a) * inner..][..inner].iter_mut().zip(g) {
                *d = gv * scale;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

fn masked_dims(x: &Tensor, valid: &[usize]) -> Result<(usize, usize, usize)> {
    let [n, c, l] = *x.shape() else {
        return Err(Error::Shape(format!("masked mean expects (N,C,L), got {:?}", x.shape())));
    };
    if valid.len() != n || valid.iter().any(|&v| v == 0 || v > l) {
        return Err(Error::Shape(format!(
            "valid lengths {valid:?} do not fit a batch of {n} with length {l}"
        )));
    }
    Ok((n, c, l))
}

/// Mean over the last axis of `(N, C, L)`, restricted to the first `valid[n]`
/// positions of sample `n`.
pub fn masked_mean_last(x: &Tensor, valid: &[usize]) -> Result<Tensor> {
    let (n, c, l) = masked_dims(x, valid)?;
    let mut out = vec![0.0; n * c];
    for b in 0..n {
        for ch in 0..c {
            let row = &x.data()[(b * c + ch) * l..][..valid[b]];
            out[b * c + ch] = row.iter().sum::<f64>() / valid[b] as f64;
        }
    }
    Tensor::new(vec![n, c], out)
}

pub fn masked_mean_last_backward(
    input_shape: &[usize],
    valid: &[usize],
    grad_out: &Tensor,
) -> Result<Tensor> {
    let probe = Tensor::zeros(input_shape);
    let (n, c, l) = masked_dims(&probe, valid)?;
    check_grad_shape(grad_out, &[n, c], "masked mean")?;
    let mut dx = vec![0.0; n * c * l];
    for b in 0..n {
        for ch in 0..c {
            let g = grad_out.data()[b * c + ch] / valid[b] as f64;
            dx[(b * c + ch) * l..][..valid[b]].iter_mut().for_each(|d| *d = g);
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

/// Zeroes columns `w >= valid[n]` of every `(N, C, H, W)` sample.
pub fn mask_columns(x: &Tensor, valid: &[usize]) -> Result<Tensor> {
    let [n, c, h, w] = *x.shape() else {
        return Err(Error::Shape(format!("column mask expects (N,C,H,W), got {:?}", x.shape())));
    };
    if valid.len() != n {
        return Err(Error::Shape(format!("{} valid lengths for batch of {n}", valid.len())));
    }
    let mut out = x.data().to_vec();
    for b in 0..n {
        let keep = valid[b].min(w);
        for row in out[b * c * h * w..][..c * h * w].chunks_mut(w) {
            row[keep..].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Vector-Jacobian product of softmax: `p * (g - <g, p>)`.
pub fn softmax_backward(probs: &[f64], grad_out: &[f64]) -> Result<Vec<f64>> {
    if probs.len() != grad_out.len() || probs.is_empty() {
        return Err(Error::Shape("softmax backward length mismatch".into()));
    }
    let dot: f64 = probs.iter().zip(grad_out).map(|(p, g)| p * g).sum();
    Ok(probs.iter().zip(grad_out).map(|(p, g)| p * (g - dot)).collect())
}

/// `-ln(max(probs[class], 1e-12))`.
pub fn cross_entropy(probs: &[f64], class: usize) -> Result<f64> {
    let p = probs
        .get(class)
        .ok_or_else(|| Error::Shape(format!("class {class} out of range for {} probabilities", probs.len())))?;
    Ok(-p.max(PROB_FLOOR).ln())
}

pub fn cross_entropy_backward(probs: &[f64], class: usize) -> Result<Vec<f64>> {
    cross_entropy(probs, class)?;
    let mut g = vec![0.0; probs.len()];
    if probs[class] > PROB_FLOOR {
        g[class] = -1.0 / probs[class];
    }
    Ok(g)
}

/// Row-wise softmax of `(N, K)` logits followed by the mean cross-entropy
/// against `labels`. Returns `(loss, probs)`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [n, k] = *logits.shape() else {
        return Err(Error::Shape(format!("logits must be (N,K), got {:?}", logits.shape())));
    };
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    let mut probs = Vec::with_capacity(n * k);
    let mut loss = 0.0;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let p = softmax(row)?;
        loss += cross_entropy(&p, y)?;
        probs.extend(p);
    }
    Ok((loss / n as f64, Tensor::new(vec![n, k], probs)?))
}

/// `(probs - onehot) / N`, scaled by the upstream scalar gradient.
pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize], upstream: f64) -> Result<Tensor> {
    let [n, k] = *probs.shape() else {
        return Err(Error::Shape("probs must be (N,K)".into()));
    };
    let mut g = probs.data().to_vec();
    for (b, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Shape(format!("label {y} out of range for {k} classes")));
        }
        g[b * k + y] -= 1.0;
    }
    let scale = upstream / n as f64;
    g.iter_mut().for_each(|v| *v *= scale);
    Tensor::new(vec![n, k], g)
}
