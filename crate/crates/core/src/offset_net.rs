//! Small network predicting deformable sub-box offsets from a first-stage crop.
//!
//! 5x5 conv + relu, global average pool, 1x1 linear map to `2 * G * G` values, tanh, clamp.
//! Output channel `2t` is the x offset of sub-box `t`, `2t + 1` its y offset.

use rand::Rng;

use crate::conv::{conv2d, conv2d_backward, ConvParams};
use crate::error::{shape_err, Result};
use crate::roi::SubBoxOffsets;
use crate::tensor::{relu, relu_backward, Tensor4};

#[derive(Clone, Debug, PartialEq)]
pub struct OffsetNet {
    pub conv: ConvParams,
    pub fc: ConvParams,
    pub grid: usize,
}

pub struct OffsetCache {
    input: Tensor4,
    act: Tensor4,
    pooled: Tensor4,
    squashed: Vec<f64>,
}

pub struct OffsetNetGrads {
    pub net: OffsetNet,
    pub input: Tensor4,
}

impl OffsetNet {
    /// Random hidden layer with a zero output layer, so initial offsets are exactly zero.
    pub fn init(in_c: usize, hidden: usize, grid: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: ConvParams::init_uniform(hidden, in_c, 5, rng),
            fc: ConvParams::zeros(2 * grid * grid, hidden, 1),
            grid,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            conv: ConvParams::zeros(self.conv.out_channels(), self.conv.in_channels(), self.conv.kernel_size().0),
            fc: ConvParams::zeros(self.fc.out_channels(), self.fc.in_channels(), 1),
            grid: self.grid,
        }
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params() + self.fc.num_params()
    }

    pub fn push_flat(&self, out: &mut Vec<f64>) {
        self.conv.push_flat(out);
        self.fc.push_flat(out);
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> usize {
        let n = self.conv.load_flat(flat);
        n + self.fc.load_flat(&flat[n..])
    }

    pub fn forward(&self, cropped: &Tensor4) -> Result<(SubBoxOffsets, OffsetCache)> {
        if cropped.n() != 1 {
            return shape_err("offset net takes a single crop");
        }
        let act = relu(&conv2d(cropped, &self.conv)?);
        let hw = (act.h() * act.w()) as f64;
        let pooled = Tensor4::from_fn([1, act.c(), 1, 1], |_, c, _, _| act.plane(0, c).iter().sum::<f64>() / hw);
        let raw = conv2d(&pooled, &self.fc)?;
        let squashed: Vec<f64> = raw.data().iter().map(|v| v.tanh()).collect();
        let offsets = squashed.chunks_exact(2).map(|p| [p[0], p[1]]).collect();
        let offsets = SubBoxOffsets::new(self.grid, offsets)?;
        Ok((
            offsets,
            OffsetCache {
                input: cropped.clone(),
                act,
                pooled,
                squashed,
            },
        ))
    }

    pub fn backward(&self, cache: &OffsetCache, grad_offsets: &[[f64; 2]]) -> Result<OffsetNetGrads> {
        if grad_offsets.len() * 2 != cache.squashed.len() {
            return shape_err("offset gradient count does not match the network output");
        }
        // tanh output lies strictly inside (-1, 1), so the clamp passes gradients through
        let g_raw: Vec<f64> = grad_offsets
            .iter()
            .flatten()
            .zip(&cache.squashed)
            .map(|(g, s)| g * (1.0 - s * s))
            .collect();
        let g_raw = Tensor4::from_vec([1, g_raw.len(), 1, 1], g_raw)?;
        let fc = conv2d_backward(&cache.pooled, &self.fc, &g_raw)?;
        let hw = (cache.act.h() * cache.act.w()) as f64;
        let g_act = Tensor4::from_fn(cache.act.shape(), |_, c, _, _| fc.input.data()[c] / hw);
        let g_pre = relu_backward(&cache.act, &g_act)?;
        let conv = conv2d_backward(&cache.input, &self.conv, &g_pre)?;
        let mut net = self.zeros_like();
        net.conv.weight = conv.weight;
        net.conv.bias = conv.bias;
        net.fc.weight = fc.weight;
        net.fc.bias = fc.bias;
        Ok(OffsetNetGrads {
            net,
            input: conv.input,
        })
    }
}
