//! Dense layers with hand-written backward passes.
//!
//! Every forward op is a pure function of its inputs. The matching
//! `*_backward` function takes the forward inputs (or a cache) and the
//! upstream gradient and returns gradients for every differentiable input.

use rand::Rng;

use super::tensor::{Parameter, Tensor};
use crate::error::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad_scalar(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

pub fn silu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    Tensor::new(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &g)| g * silu_grad_scalar(v))
            .collect(),
    )
    .expect("same shape")
}

pub fn silu_slice(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| silu_scalar(v)).collect()
}

pub fn silu_backward_slice(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| g * silu_grad_scalar(v))
        .collect()
}

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu_slice(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
        .collect()
}

pub fn leaky_relu_backward_slice(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| if v > 0.0 { g } else { LEAKY_SLOPE * g })
        .collect()
}

// ---------------------------------------------------------------------------
// linear

/// `y = W·x + b` for `x: [n_in]`, `W: [n_out × n_in]`, `b: [n_out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n_out, n_in) = match w.shape() {
        [o, i] => (*o, *i),
        _ => {
            return Err(Error::Dimension {
                op: "linear",
                left: w.shape().to_vec(),
                right: x.shape().to_vec(),
            })
        }
    };
    if x.shape() != [n_in] {
        return Err(Error::Dimension {
            op: "linear",
            left: w.shape().to_vec(),
            right: x.shape().to_vec(),
        });
    }
    if b.shape() != [n_out] {
        return Err(Error::Dimension {
            op: "linear",
            left: w.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(Tensor::from_vec(linear_raw(x.data(), w.data(), b.data(), n_out, n_in)))
}

pub fn linear_raw(x: &[f64], w: &[f64], b: &[f64], n_out: usize, n_in: usize) -> Vec<f64> {
    (0..n_out)
        .map(|o| {
            let row = &w[o * n_in..(o + 1) * n_in];
            b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
        })
        .collect()
}

/// Gradients `(dx, dW, db)` of `linear`.
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n_out, n_in) = (w.shape()[0], w.shape()[1]);
    let mut dx = vec![0.0; n_in];
    let mut dw = vec![0.0; n_out * n_in];
    linear_backward_raw(x.data(), w.data(), dy.data(), n_out, n_in, &mut dx, &mut dw);
    (
        Tensor::from_vec(dx),
        Tensor::new(vec![n_out, n_in], dw).expect("shape"),
        dy.clone(),
    )
}

fn linear_backward_raw(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n_out: usize,
    n_in: usize,
    dx: &mut [f64],
    dw: &mut [f64],
) {
    for o in 0..n_out {
        let g = dy[o];
        if g == 0.0 {
            continue;
        }
        let row = &w[o * n_in..(o + 1) * n_in];
        let drow = &mut dw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            dx[i] += g * row[i];
            drow[i] += g * x[i];
        }
    }
}

/// Fully connected layer holding its own parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: Parameter::he(&[n_out, n_in], n_in, rng),
            bias: Parameter::zeros(&[n_out]),
        }
    }

    pub fn zeroed(n_in: usize, n_out: usize) -> Self {
        Linear {
            weight: Parameter::zeros(&[n_out, n_in]),
            bias: Parameter::zeros(&[n_out]),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n_in());
        linear_raw(
            x,
            self.weight.value.data(),
            self.bias.value.data(),
            self.n_out(),
            self.n_in(),
        )
    }

    /// Accumulates parameter gradients and returns `dx`.
    pub fn backward(&mut self, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let (n_out, n_in) = (self.n_out(), self.n_in());
        let mut dx = vec![0.0; n_in];
        linear_backward_raw(
            x,
            self.weight.value.data(),
            dy,
            n_out,
            n_in,
            &mut dx,
            self.weight.grad.data_mut(),
        );
        self.bias.accumulate(dy);
        dx
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Parameter)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// conv2d

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], k_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c_in, h, w) = match x_shape {
            [c, h, w] => (*c, *h, *w),
            _ => {
                return Err(Error::Dimension {
                    op: "conv2d",
                    left: x_shape.to_vec(),
                    right: k_shape.to_vec(),
                })
            }
        };
        let (c_out, kc, kh, kw) = match k_shape {
            [o, c, kh, kw] => (*o, *c, *kh, *kw),
            _ => {
                return Err(Error::Dimension {
                    op: "conv2d",
                    left: x_shape.to_vec(),
                    right: k_shape.to_vec(),
                })
            }
        };
        if kc != c_in {
            return Err(Error::Dimension {
                op: "conv2d",
                left: x_shape.to_vec(),
                right: k_shape.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if kh > ph || kw > pw {
            return Err(Error::config(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            )));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::config(format!(
                "conv2d output extent not integral: ({ph}-{kh})/{stride}, ({pw}-{kw})/{stride}"
            )));
        }
        Ok(ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        })
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` lies in range.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        valid_range(self.w, self.ow, self.stride, self.pad, kx)
    }

    #[inline]
    fn row_range(&self, ky: usize) -> (usize, usize) {
        valid_range(self.h, self.oh, self.stride, self.pad, ky)
    }
}

#[inline]
fn valid_range(n_in: usize, n_out: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    // i = o*stride + k - pad must satisfy 0 <= i < n_in
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if n_in + pad > k {
        ((n_in + pad - k - 1) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Cross-correlation of `x: [C_in×H×W]` with `k: [C_out×C_in×kh×kw]`.
pub fn conv2d(
    x: &Tensor,
    k: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(x.shape(), k.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(Error::Dimension {
                op: "conv2d bias",
                left: k.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
    }
    let out = conv2d_raw(&g, x.data(), k.data(), bias.map(|b| b.data()));
    Tensor::new(vec![g.c_out, g.oh, g.ow], out)
}

pub fn conv2d_raw(g: &ConvGeometry, x: &[f64], k: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let plane_out = g.oh * g.ow;
    let plane_in = g.h * g.w;
    let mut out = vec![0.0; g.c_out * plane_out];
    for o in 0..g.c_out {
        let out_o = &mut out[o * plane_out..(o + 1) * plane_out];
        if let Some(b) = bias {
            out_o.iter_mut().for_each(|v| *v = b[o]);
        }
        for c in 0..g.c_in {
            let xin = &x[c * plane_in..(c + 1) * plane_in];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = g.row_range(ky);
                for kx in 0..g.kw {
                    let wv = k[((o * g.c_in + c) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = g.col_range(kx);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let row_in = &xin[iy * g.w..(iy + 1) * g.w];
                        let row_out = &mut out_o[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let shift = ox_lo + kx - g.pad;
                            let n = ox_hi - ox_lo;
                            for (a, b) in row_out[ox_lo..ox_hi]
                                .iter_mut()
                                .zip(&row_in[shift..shift + n])
                            {
                                *a += wv * b;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                row_out[ox] += wv * row_in[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dk, dbias)`.
pub fn conv2d_backward_raw(
    g: &ConvGeometry,
    x: &[f64],
    k: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane_out = g.oh * g.ow;
    let plane_in = g.h * g.w;
    let mut dx = vec![0.0; g.c_in * plane_in];
    let mut dk = vec![0.0; k.len()];
    let mut db = vec![0.0; g.c_out];
    for o in 0..g.c_out {
        let dy_o = &dy[o * plane_out..(o + 1) * plane_out];
        db[o] = dy_o.iter().sum();
        for c in 0..g.c_in {
            let xin = &x[c * plane_in..(c + 1) * plane_in];
            let dxin = &mut dx[c * plane_in..(c + 1) * plane_in];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = g.row_range(ky);
                for kx in 0..g.kw {
                    let widx = ((o * g.c_in + c) * g.kh + ky) * g.kw + kx;
                    let wv = k[widx];
                    let (ox_lo, ox_hi) = g.col_range(kx);
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let row_dy = &dy_o[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let shift = ox_lo + kx - g.pad;
                            let n = ox_hi - ox_lo;
                            let row_in = &xin[iy * g.w + shift..iy * g.w + shift + n];
                            let row_dx = &mut dxin[iy * g.w + shift..iy * g.w + shift + n];
                            for ((d, &gy), &xv) in
                                row_dx.iter_mut().zip(&row_dy[ox_lo..ox_hi]).zip(row_in)
                            {
                                *d += wv * gy;
                                acc += gy * xv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * g.stride + kx - g.pad;
                                dxin[iy * g.w + ix] += wv * row_dy[ox];
                                acc += row_dy[ox] * xin[iy * g.w + ix];
                            }
                        }
                    }
                    dk[widx] += acc;
                }
            }
        }
    }
    (dx, dk, db)
}

pub fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeometry::new(x.shape(), k.shape(), stride, pad)?;
    if dy.shape() != [g.c_out, g.oh, g.ow] {
        return Err(Error::Dimension {
            op: "conv2d_backward",
            left: vec![g.c_out, g.oh, g.ow],
            right: dy.shape().to_vec(),
        });
    }
    let (dx, dk, db) = conv2d_backward_raw(&g, x.data(), k.data(), dy.data());
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(k.shape().to_vec(), dk)?,
        Tensor::from_vec(db),
    ))
}

/// 2-D convolution layer with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        Conv2d {
            weight: Parameter::he(&[c_out, c_in, kernel, kernel], c_in * kernel * kernel, rng),
            bias: Parameter::zeros(&[c_out]),
            stride,
            pad,
        }
    }

    pub fn zeroed(c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            weight: Parameter::zeros(&[c_out, c_in, kernel, kernel]),
            bias: Parameter::zeros(&[c_out]),
            stride,
            pad,
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn geometry(&self, x: &Tensor) -> Result<ConvGeometry> {
        ConvGeometry::new(x.shape(), self.weight.value.shape(), self.stride, self.pad)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.geometry(x)?;
        let out = conv2d_raw(&g, x.data(), self.weight.value.data(), Some(self.bias.value.data()));
        Tensor::new(vec![g.c_out, g.oh, g.ow], out)
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        let g = self.geometry(x)?;
        let (dx, dk, db) = conv2d_backward_raw(&g, x.data(), self.weight.value.data(), dy.data());
        self.weight.accumulate(&dk);
        self.bias.accumulate(&db);
        Tensor::new(x.shape().to_vec(), dx)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Parameter)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// conv1d (dilated, for temporal sequences laid out as [C × L])

#[derive(Clone, Copy, Debug)]
pub struct Conv1dGeometry {
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub out_len: usize,
}

/// Dilated 1-D convolution layer. `causal` pads only on the left so that
/// output step `i` sees inputs `<= i`; otherwise padding is symmetric.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub weight: Parameter,
    pub bias: Parameter,
    pub dilation: usize,
    pub causal: bool,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        causal: bool,
        rng: &mut R,
    ) -> Self {
        Conv1d {
            weight: Parameter::he(&[c_out, c_in, kernel], c_in * kernel, rng),
            bias: Parameter::zeros(&[c_out]),
            dilation,
            causal,
        }
    }

    pub fn geometry(&self, c_in: usize, len: usize) -> Result<Conv1dGeometry> {
        let s = self.weight.value.shape();
        let (c_out, kc, kernel) = (s[0], s[1], s[2]);
        if kc != c_in {
            return Err(Error::Dimension {
                op: "conv1d",
                left: vec![c_in, len],
                right: s.to_vec(),
            });
        }
        let span = self.dilation * (kernel - 1);
        let pad_left = if self.causal { span } else { span / 2 };
        Ok(Conv1dGeometry {
            c_in,
            len,
            c_out,
            kernel,
            dilation: self.dilation,
            pad_left,
            out_len: len,
        })
    }

    /// `x` is `[c_in × len]` row-major.
    pub fn forward(&self, x: &[f64], c_in: usize, len: usize) -> Result<Vec<f64>> {
        let g = self.geometry(c_in, len)?;
        let w = self.weight.value.data();
        let b = self.bias.value.data();
        let mut out = vec![0.0; g.c_out * g.out_len];
        for o in 0..g.c_out {
            let row = &mut out[o * g.out_len..(o + 1) * g.out_len];
            row.iter_mut().for_each(|v| *v = b[o]);
            for c in 0..g.c_in {
                let xr = &x[c * len..(c + 1) * len];
                for j in 0..g.kernel {
                    let wv = w[(o * g.c_in + c) * g.kernel + j];
                    let off = j * g.dilation;
                    for (i, r) in row.iter_mut().enumerate() {
                        let src = i + off;
                        if src >= g.pad_left && src - g.pad_left < len {
                            *r += wv * xr[src - g.pad_left];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&mut self, x: &[f64], c_in: usize, len: usize, dy: &[f64]) -> Result<Vec<f64>> {
        let g = self.geometry(c_in, len)?;
        let w = self.weight.value.data().to_vec();
        let mut dx = vec![0.0; c_in * len];
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; g.c_out];
        for o in 0..g.c_out {
            let dr = &dy[o * g.out_len..(o + 1) * g.out_len];
            db[o] = dr.iter().sum();
            for c in 0..g.c_in {
                let xr = &x[c * len..(c + 1) * len];
                for j in 0..g.kernel {
                    let widx = (o * g.c_in + c) * g.kernel + j;
                    let off = j * g.dilation;
                    let mut acc = 0.0;
                    for (i, &gy) in dr.iter().enumerate() {
                        let src = i + off;
                        if src >= g.pad_left && src - g.pad_left < len {
                            let xi = src - g.pad_left;
                            acc += gy * xr[xi];
                            dx[c * len + xi] += w[widx] * gy;
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
        self.weight.accumulate(&dw);
        self.bias.accumulate(&db);
        Ok(dx)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Parameter)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// group norm

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GroupNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub groups: usize,
}

/// Group normalisation over `[C×H×W]` with population statistics, followed by
/// a per-channel affine transform.
pub fn group_norm(
    x: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, GroupNormCache)> {
    let (c, h, w) = x.dims3()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::config(format!(
            "group_norm: {c} channels not divisible into {groups} groups"
        )));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Dimension {
            op: "group_norm",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    let per = c / groups * h * w;
    let plane = h * w;
    let xs = x.data();
    let mut xhat = vec![0.0; xs.len()];
    let mut out = vec![0.0; xs.len()];
    let mut inv_std = Vec::with_capacity(groups);
    for gi in 0..groups {
        let seg = &xs[gi * per..(gi + 1) * per];
        let mean = seg.iter().sum::<f64>() / per as f64;
        let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        for (i, &v) in seg.iter().enumerate() {
            let idx = gi * per + i;
            let ch = idx / plane;
            let xh = (v - mean) * istd;
            xhat[idx] = xh;
            out[idx] = gamma.data()[ch] * xh + beta.data()[ch];
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        GroupNormCache {
            xhat: Tensor::new(x.shape().to_vec(), xhat)?,
            inv_std,
            groups,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward(
    cache: &GroupNormCache,
    gamma: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let shape = cache.xhat.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let plane = h * w;
    let per = c / cache.groups * plane;
    let xh = cache.xhat.data();
    let g = dy.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        for i in ch * plane..(ch + 1) * plane {
            dgamma[ch] += g[i] * xh[i];
            dbeta[ch] += g[i];
        }
    }
    let mut dx = vec![0.0; xh.len()];
    for gi in 0..cache.groups {
        let range = gi * per..(gi + 1) * per;
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for i in range.clone() {
            let d = g[i] * gamma.data()[i / plane];
            sum_d += d;
            sum_dx += d * xh[i];
        }
        let m = per as f64;
        let istd = cache.inv_std[gi];
        for i in range {
            let d = g[i] * gamma.data()[i / plane];
            dx[i] = istd / m * (m * d - sum_d - xh[i] * sum_dx);
        }
    }
    (
        Tensor::new(shape.to_vec(), dx).expect("shape"),
        Tensor::from_vec(dgamma),
        Tensor::from_vec(dbeta),
    )
}

/// Group-norm layer with learnable affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(channels: usize) -> Self {
        GroupNorm {
            gamma: Parameter::new(Tensor::filled(&[channels], 1.0)),
            beta: Parameter::zeros(&[channels]),
            groups: default_groups(channels),
            eps: GROUP_NORM_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, GroupNormCache)> {
        group_norm(x, self.groups, &self.gamma.value, &self.beta.value, self.eps)
    }

    pub fn backward(&mut self, cache: &GroupNormCache, dy: &Tensor) -> Tensor {
        let (dx, dg, db) = group_norm_backward(cache, &self.gamma.value, dy);
        self.gamma.accumulate(dg.data());
        self.beta.accumulate(db.data());
        dx
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Parameter)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

/// Largest group count in {8, 4, 2} that leaves at least two channels per
/// group, falling back to a single group.
pub fn default_groups(channels: usize) -> usize {
    [8, 4, 2]
        .into_iter()
        .find(|&g| channels % g == 0 && channels / g >= 2)
        .unwrap_or(1)
}

// ---------------------------------------------------------------------------
// resampling helpers

/// Nearest-neighbour 2× upsampling of `[C×H×W]`.
pub fn upsample_nearest2(x: &Tensor) -> Tensor {
    let (c, h, w) = x.dims3().expect("rank-3");
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    let xs = x.data();
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[(ch * oh + y) * ow + xx] = xs[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).expect("shape")
}

pub fn upsample_nearest2_backward(dy: &Tensor) -> Tensor {
    let (c, oh, ow) = dy.dims3().expect("rank-3");
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = vec![0.0; c * h * w];
    let g = dy.data();
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                dx[(ch * h + y / 2) * w + xx / 2] += g[(ch * oh + y) * ow + xx];
            }
        }
    }
    Tensor::new(vec![c, h, w], dx).expect("shape")
}

// ---------------------------------------------------------------------------
// embedding table

/// Lookup table of `count` learned vectors of width `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub table: Parameter,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> Self {
        Embedding {
            table: Parameter::new(Tensor::randn(&[count, dim], 1.0, rng)),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.value.shape()[1]
    }

    pub fn forward(&self, index: usize) -> &[f64] {
        let d = self.dim();
        &self.table.value.data()[index * d..(index + 1) * d]
    }

    pub fn backward(&mut self, index: usize, dy: &[f64]) {
        let d = self.dim();
        for (g, v) in self.table.grad.data_mut()[index * d..(index + 1) * d].iter_mut().zip(dy) {
            *g += v;
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Parameter)) {
        f(format!("{prefix}.table"), &self.table);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter)) {
        f(format!("{prefix}.table"), &mut self.table);
    }
}
