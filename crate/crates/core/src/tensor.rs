//! Dense NCHW tensors in f64 and the elementwise layers the heads need.

use crate::error::{arg_err, shape_err, Result};

/// A dense 4-D array laid out row-major as (batch, channel, height, width).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d));
        match len {
            Some(len) if len == data.len() => Ok(Self { shape, data }),
            _ => shape_err(format!(
                "shape {:?} does not match data length {}",
                shape,
                data.len()
            )),
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(ni, ci, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// The (h, w) plane of one channel.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn add(&self, other: &Tensor4) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor4) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channels `start..start + len` of every batch item.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if start + len > c {
            return shape_err(format!(
                "channel slice {}..{} out of range for {} channels",
                start,
                start + len,
                c
            ));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for ni in 0..n {
            let from = (ni * c + start) * hw;
            data.extend_from_slice(&self.data[from..from + len * hw]);
        }
        Ok(Self {
            shape: [n, len, h, w],
            data,
        })
    }

    pub fn channel(&self, c: usize) -> Result<Self> {
        self.slice_channels(c, 1)
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor4, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!(
                "{}: {:?} vs {:?}",
                what, self.shape, other.shape
            ));
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor4) -> Tensor4 {
    x.map(sigmoid_scalar)
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| v.max(0.0))
}

/// Gradient of relu given its *output* (or input; the sign pattern is the same).
pub fn relu_backward(activation: &Tensor4, grad: &Tensor4) -> Result<Tensor4> {
    activation.check_same_shape(grad, "relu_backward")?;
    let data = activation
        .data
        .iter()
        .zip(&grad.data)
        .map(|(&a, &g)| if a > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor4 {
        shape: grad.shape,
        data,
    })
}

/// Concatenates tensors along the channel axis. All inputs must agree on (n, h, w).
pub fn concat_channels(xs: &[&Tensor4]) -> Result<Tensor4> {
    let Some(first) = xs.first() else {
        return arg_err("concat_channels needs at least one tensor");
    };
    let [n, _, h, w] = first.shape;
    for x in xs {
        if x.n() != n || x.h() != h || x.w() != w {
            return shape_err(format!(
                "concat_channels: {:?} vs {:?}",
                first.shape, x.shape
            ));
        }
    }
    let total_c: usize = xs.iter().map(|x| x.c()).sum();
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total_c * hw);
    for ni in 0..n {
        for x in xs {
            let from = ni * x.c() * hw;
            data.extend_from_slice(&x.data[from..from + x.c() * hw]);
        }
    }
    Ok(Tensor4 {
        shape: [n, total_c, h, w],
        data,
    })
}
