//! 2-D cross-correlation with bias, forward and backward.

use rand::Rng;

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor4;

/// Kernel `(out_c, in_c, kh, kw)`, one bias per output channel, stride and zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor4,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
}

/// Gradients of a scalar loss with respect to a convolution's input and parameters.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor4,
    pub weight: Tensor4,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn new(weight: Tensor4, bias: Vec<f64>, stride: usize, padding: usize) -> Result<Self> {
        let p = Self {
            weight,
            bias,
            stride,
            padding,
        };
        p.validate()?;
        Ok(p)
    }

    /// Zero kernel and bias, padded to preserve spatial size at stride 1.
    pub fn zeros(out_c: usize, in_c: usize, k: usize) -> Self {
        Self {
            weight: Tensor4::zeros([out_c, in_c, k, k]),
            bias: vec![0.0; out_c],
            stride: 1,
            padding: k / 2,
        }
    }

    /// Uniform init in `[-s, s]` with `s = 1/sqrt(in_c * k * k)`, "same" padding, zero bias.
    pub fn init_uniform(out_c: usize, in_c: usize, k: usize, rng: &mut impl Rng) -> Self {
        let s = 1.0 / ((in_c * k * k) as f64).sqrt();
        let weight = Tensor4::from_fn([out_c, in_c, k, k], |_, _, _, _| rng.random_range(-s..=s));
        Self {
            weight,
            bias: vec![0.0; out_c],
            stride: 1,
            padding: k / 2,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.n()
    }
    pub fn in_channels(&self) -> usize {
        self.weight.c()
    }
    pub fn kernel_size(&self) -> (usize, usize) {
        (self.weight.h(), self.weight.w())
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel_size();
        if kh % 2 == 0 || kw % 2 == 0 {
            return arg_err(format!("kernel {}x{} must have odd sides", kh, kw));
        }
        if self.stride == 0 {
            return arg_err("stride must be positive");
        }
        if self.bias.len() != self.out_channels() {
            return shape_err(format!(
                "bias has {} entries for {} output channels",
                self.bias.len(),
                self.out_channels()
            ));
        }
        Ok(())
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel_size();
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < kh || pw < kw {
            return shape_err(format!(
                "input {}x{} with padding {} is smaller than kernel {}x{}",
                h, w, self.padding, kh, kw
            ));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn push_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weight.data());
        out.extend_from_slice(&self.bias);
    }

    /// Loads parameters from `flat`, returning the number of values consumed.
    pub fn load_flat(&mut self, flat: &[f64]) -> usize {
        let nw = self.weight.len();
        let nb = self.bias.len();
        self.weight.data_mut().copy_from_slice(&flat[..nw]);
        self.bias.copy_from_slice(&flat[nw..nw + nb]);
        nw + nb
    }
}

impl ConvGrads {
    pub fn push_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weight.data());
        out.extend_from_slice(&self.bias);
    }
}

fn check_input(input: &Tensor4, params: &ConvParams) -> Result<(usize, usize)> {
    params.validate()?;
    if input.c() != params.in_channels() {
        return shape_err(format!(
            "conv2d: input has {} channels, kernel expects {}",
            input.c(),
            params.in_channels()
        ));
    }
    params.output_hw(input.h(), input.w())
}

/// Copies every channel of batch item `ni` into a zero border of width `pad`.
fn padded_planes(input: &Tensor4, ni: usize, pad: usize) -> Vec<f64> {
    let [_, c, h, w] = input.shape();
    if pad == 0 {
        let len = c * h * w;
        return input.data()[ni * len..(ni + 1) * len].to_vec();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut buf = vec![0.0; c * hp * wp];
    for ci in 0..c {
        let plane = input.plane(ni, ci);
        for y in 0..h {
            let at = (ci * hp + y + pad) * wp + pad;
            buf[at..at + w].copy_from_slice(&plane[y * w..(y + 1) * w]);
        }
    }
    buf
}

/// `dst[x] += sum_k wt[k] * src[x + k]`.
#[inline]
fn row_corr(dst: &mut [f64], src: &[f64], wt: &[f64]) {
    match *wt {
        [a] => {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += a * s;
            }
        }
        [a, b, c, d, e] => {
            let src = &src[..dst.len() + 4];
            for (x, o) in dst.iter_mut().enumerate() {
                *o += a * src[x] + b * src[x + 1] + c * src[x + 2] + d * src[x + 3] + e * src[x + 4];
            }
        }
        _ => {
            for (k, &wk) in wt.iter().enumerate() {
                for (d, &s) in dst.iter_mut().zip(&src[k..]) {
                    *d += wk * s;
                }
            }
        }
    }
}

/// Dot product with four interleaved accumulators.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn conv2d(input: &Tensor4, params: &ConvParams) -> Result<Tensor4> {
    let (oh, ow) = check_input(input, params)?;
    let [n, ic, h, w] = input.shape();
    let oc = params.out_channels();
    let (kh, kw) = params.kernel_size();
    let pad = params.padding;
    let stride = params.stride;
    let mut out = Tensor4::zeros([n, oc, oh, ow]);
    let wt = params.weight.data();
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);

    for ni in 0..n {
        let buf = padded_planes(input, ni, pad);
        for o in 0..oc {
            let out_plane = out.plane_mut(ni, o);
            out_plane.fill(params.bias[o]);
            for c in 0..ic {
                let plane = &buf[c * hp * wp..(c + 1) * hp * wp];
                for ky in 0..kh {
                    let wrow = &wt[((o * ic + c) * kh + ky) * kw..((o * ic + c) * kh + ky + 1) * kw];
                    if wrow.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    for oy in 0..oh {
                        let dst = &mut out_plane[oy * ow..(oy + 1) * ow];
                        let row = &plane[(oy * stride + ky) * wp..(oy * stride + ky + 1) * wp];
                        if stride == 1 {
                            row_corr(dst, row, wrow);
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                for (kx, &wv) in wrow.iter().enumerate() {
                                    *d += wv * row[ox * stride + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `<grad_out, conv2d(input, params)>` with respect to input, kernel and bias.
pub fn conv2d_backward(input: &Tensor4, params: &ConvParams, grad_out: &Tensor4) -> Result<ConvGrads> {
    let (oh, ow) = check_input(input, params)?;
    let [n, ic, h, w] = input.shape();
    let oc = params.out_channels();
    if grad_out.shape() != [n, oc, oh, ow] {
        return shape_err(format!(
            "conv2d_backward: grad_out {:?}, expected {:?}",
            grad_out.shape(),
            [n, oc, oh, ow]
        ));
    }
    let (kh, kw) = params.kernel_size();
    let pad = params.padding;
    let stride = params.stride;
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut g_in = Tensor4::zeros(input.shape());
    let mut g_w = Tensor4::zeros(params.weight.shape());
    let mut g_b = vec![0.0; oc];
    let wt = params.weight.data();
    // grad_out rows padded by kw - 1 zeros on both sides turn the input gradient into a
    // correlation with the flipped kernel row
    let gpw = ow + 2 * (kw - 1);
    let mut gpad = vec![0.0; oh * gpw];
    let mut flipped = vec![0.0; kw];

    for ni in 0..n {
        let buf = padded_planes(input, ni, pad);
        let mut gbuf = vec![0.0; ic * hp * wp];
        for o in 0..oc {
            let go_plane = grad_out.plane(ni, o);
            g_b[o] += go_plane.iter().sum::<f64>();
            if stride == 1 {
                for oy in 0..oh {
                    gpad[oy * gpw + kw - 1..oy * gpw + kw - 1 + ow].copy_from_slice(&go_plane[oy * ow..(oy + 1) * ow]);
                }
            }
            for c in 0..ic {
                let plane = &buf[c * hp * wp..(c + 1) * hp * wp];
                let gplane = &mut gbuf[c * hp * wp..(c + 1) * hp * wp];
                for ky in 0..kh {
                    let base = ((o * ic + c) * kh + ky) * kw;
                    let wrow = &wt[base..base + kw];
                    let gw_row = &mut g_w.data_mut()[base..base + kw];
                    let nonzero = wrow.iter().any(|&v| v != 0.0);
                    for (m, f) in flipped.iter_mut().enumerate() {
                        *f = wrow[kw - 1 - m];
                    }
                    for oy in 0..oh {
                        let go_row = &go_plane[oy * ow..(oy + 1) * ow];
                        let r = oy * stride + ky;
                        let row = &plane[r * wp..(r + 1) * wp];
                        if stride == 1 {
                            for (kx, g) in gw_row.iter_mut().enumerate() {
                                *g += dot(go_row, &row[kx..kx + ow]);
                            }
                            if nonzero {
                                row_corr(&mut gplane[r * wp..(r + 1) * wp], &gpad[oy * gpw..(oy + 1) * gpw], &flipped);
                            }
                        } else {
                            let grow = &mut gplane[r * wp..(r + 1) * wp];
                            for (ox, &g) in go_row.iter().enumerate() {
                                for kx in 0..kw {
                                    gw_row[kx] += g * row[ox * stride + kx];
                                    grow[ox * stride + kx] += wrow[kx] * g;
                                }
                            }
                        }
                    }
                }
            }
        }
        for c in 0..ic {
            let gplane = &gbuf[c * hp * wp..(c + 1) * hp * wp];
            let dst = g_in.plane_mut(ni, c);
            for y in 0..h {
                let at = (y + pad) * wp + pad;
                dst[y * w..(y + 1) * w].copy_from_slice(&gplane[at..at + w]);
            }
        }
    }
    Ok(ConvGrads {
        input: g_in,
        weight: g_w,
        bias: g_b,
    })
}
