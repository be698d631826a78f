//! ROI kernels: bilinear crop-and-resize, the two-stage deformable variant, and direction
//! pooling, each with its adjoint.
//!
//! Continuous coordinates place pixel `(y, x)` over `[x, x+1) x [y, y+1)`, so its centre sits
//! at `(x + 0.5, y + 0.5)`. Output cell `(i, j)` of an `out_h x out_w` crop samples
//! `x = x0 + (j + 0.5) * (x1 - x0) / out_w` (likewise for y). Bilinear taps that fall outside
//! the feature map read zero.

use serde::{Deserialize, Serialize};

use crate::direction::{region_index, DirectionConfig};
use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub label: usize,
    pub score: f64,
}

impl RoiBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64, label: usize, score: f64) -> Result<Self> {
        let b = Self {
            x0,
            y0,
            x1,
            y1,
            label,
            score,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite());
        if !finite || !(self.x1 > self.x0) || !(self.y1 > self.y0) {
            return arg_err(format!(
                "degenerate box ({}, {}) - ({}, {})",
                self.x0, self.y0, self.x1, self.y1
            ));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }
    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }
    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x0: self.x0 + dx,
            x1: self.x1 + dx,
            y0: self.y0 + dy,
            y1: self.y1 + dy,
            ..*self
        }
    }

    /// Maps the box into a feature map downsampled by `stride`.
    pub fn to_feature_coords(&self, stride: usize) -> Self {
        if stride == 1 {
            return *self;
        }
        let s = stride as f64;
        Self {
            x0: self.x0 / s,
            y0: self.y0 / s,
            x1: self.x1 / s,
            y1: self.y1 / s,
            ..*self
        }
    }
}

#[inline]
pub(crate) fn sample_coord(lo: f64, hi: f64, idx: usize, n: usize) -> f64 {
    lo + (idx as f64 + 0.5) * (hi - lo) / n as f64
}

/// Bilinear footprint of a continuous point: four flat indices (or `usize::MAX` when off-map)
/// and their weights, plus the fractional offsets used for coordinate derivatives.
#[derive(Clone, Copy, Debug)]
struct Taps {
    idx: [usize; 4],
    wt: [f64; 4],
    ax: f64,
    ay: f64,
}

const OFF: usize = usize::MAX;

#[inline]
fn taps(x: f64, y: f64, h: usize, w: usize) -> Taps {
    let u = x - 0.5;
    let v = y - 0.5;
    let fu = u.floor();
    let fv = v.floor();
    let ax = u - fu;
    let ay = v - fv;
    let at = |yy: f64, xx: f64| -> usize {
        if xx >= 0.0 && yy >= 0.0 && xx < w as f64 && yy < h as f64 {
            yy as usize * w + xx as usize
        } else {
            OFF
        }
    };
    Taps {
        idx: [at(fv, fu), at(fv, fu + 1.0), at(fv + 1.0, fu), at(fv + 1.0, fu + 1.0)],
        wt: [
            (1.0 - ay) * (1.0 - ax),
            (1.0 - ay) * ax,
            ay * (1.0 - ax),
            ay * ax,
        ],
        ax,
        ay,
    }
}

impl Taps {
    #[inline]
    fn read(&self, plane: &[f64], k: usize) -> f64 {
        if self.idx[k] == OFF {
            0.0
        } else {
            plane[self.idx[k]]
        }
    }

    #[inline]
    fn sample(&self, plane: &[f64]) -> f64 {
        let (f00, f01, f10, f11) = (
            self.read(plane, 0),
            self.read(plane, 1),
            self.read(plane, 2),
            self.read(plane, 3),
        );
        (1.0 - self.ay) * ((1.0 - self.ax) * f00 + self.ax * f01)
            + self.ay * ((1.0 - self.ax) * f10 + self.ax * f11)
    }

    #[inline]
    fn scatter(&self, grad_plane: &mut [f64], g: f64) {
        for k in 0..4 {
            if self.idx[k] != OFF {
                grad_plane[self.idx[k]] += self.wt[k] * g;
            }
        }
    }

    /// Derivatives of the sampled value with respect to the sample's x and y.
    #[inline]
    fn coord_grad(&self, plane: &[f64]) -> (f64, f64) {
        let (f00, f01, f10, f11) = (
            self.read(plane, 0),
            self.read(plane, 1),
            self.read(plane, 2),
            self.read(plane, 3),
        );
        let dx = (1.0 - self.ay) * (f01 - f00) + self.ay * (f11 - f10);
        let dy = (1.0 - self.ax) * (f10 - f00) + self.ax * (f11 - f01);
        (dx, dy)
    }
}

fn check_features(features: &Tensor4, roi: &RoiBox, out_h: usize, out_w: usize) -> Result<()> {
    roi.validate()?;
    if features.n() != 1 {
        return shape_err(format!("ROI kernels take a single image, got batch {}", features.n()));
    }
    if out_h == 0 || out_w == 0 {
        return arg_err("output size must be at least 1x1");
    }
    Ok(())
}

/// Bilinearly resamples the box region of every channel to `(1, c, out_h, out_w)`.
pub fn crop_and_resize(features: &Tensor4, roi: &RoiBox, out_h: usize, out_w: usize) -> Result<Tensor4> {
    check_features(features, roi, out_h, out_w)?;
    let (h, w) = (features.h(), features.w());
    let grid = crop_taps(roi, h, w, out_h, out_w);
    let mut out = Tensor4::zeros([1, features.c(), out_h, out_w]);
    for c in 0..features.c() {
        let plane = features.plane(0, c);
        let dst = out.plane_mut(0, c);
        for (d, t) in dst.iter_mut().zip(&grid) {
            *d = t.sample(plane);
        }
    }
    Ok(out)
}

fn crop_taps(roi: &RoiBox, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<Taps> {
    let mut grid = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let y = sample_coord(roi.y0, roi.y1, i, out_h);
        for j in 0..out_w {
            let x = sample_coord(roi.x0, roi.x1, j, out_w);
            grid.push(taps(x, y, h, w));
        }
    }
    grid
}

/// Adjoint of [`crop_and_resize`]: accumulates `grad_out` into `grad_features`.
pub fn crop_and_resize_backward_into(grad_features: &mut Tensor4, roi: &RoiBox, grad_out: &Tensor4) -> Result<()> {
    let [_, c, out_h, out_w] = grad_out.shape();
    check_features(grad_features, roi, out_h, out_w)?;
    if grad_out.n() != 1 || c != grad_features.c() {
        return shape_err(format!(
            "crop grad {:?} does not match features {:?}",
            grad_out.shape(),
            grad_features.shape()
        ));
    }
    let grid = crop_taps(roi, grad_features.h(), grad_features.w(), out_h, out_w);
    for ch in 0..c {
        let go = grad_out.plane(0, ch).to_vec();
        let gp = grad_features.plane_mut(0, ch);
        for (t, &g) in grid.iter().zip(&go) {
            if g != 0.0 {
                t.scatter(gp, g);
            }
        }
    }
    Ok(())
}

pub fn crop_and_resize_backward(features: &Tensor4, roi: &RoiBox, grad_out: &Tensor4) -> Result<Tensor4> {
    let mut g = Tensor4::zeros(features.shape());
    crop_and_resize_backward_into(&mut g, roi, grad_out)?;
    Ok(g)
}

/// Per-sub-box translations, in fractions of the ROI's width and height.
#[derive(Clone, Debug, PartialEq)]
pub struct SubBoxOffsets {
    grid: usize,
    offsets: Vec<[f64; 2]>,
}

impl SubBoxOffsets {
    /// Offsets are listed row-major over the `grid x grid` sub-boxes and clamped to [-1, 1].
    pub fn new(grid: usize, offsets: Vec<[f64; 2]>) -> Result<Self> {
        if grid == 0 {
            return arg_err("sub-box grid must be positive");
        }
        if offsets.len() != grid * grid {
            return shape_err(format!("{} offsets for a {}x{} grid", offsets.len(), grid, grid));
        }
        if offsets.iter().flatten().any(|v| !v.is_finite()) {
            return arg_err("offsets must be finite");
        }
        let offsets = offsets
            .into_iter()
            .map(|[dx, dy]| [dx.clamp(-1.0, 1.0), dy.clamp(-1.0, 1.0)])
            .collect();
        Ok(Self { grid, offsets })
    }

    pub fn zeros(grid: usize) -> Self {
        Self {
            grid,
            offsets: vec![[0.0, 0.0]; grid * grid],
        }
    }

    pub fn grid(&self) -> usize {
        self.grid
    }
    pub fn offsets(&self) -> &[[f64; 2]] {
        &self.offsets
    }

    /// The translated sub-box `(gy, gx)` of `roi`, for visualisation.
    pub fn deformed_sub_box(&self, roi: &RoiBox, gy: usize, gx: usize) -> RoiBox {
        let g = self.grid as f64;
        let [dx, dy] = self.offsets[gy * self.grid + gx];
        let (w, h) = (roi.width(), roi.height());
        RoiBox {
            x0: roi.x0 + gx as f64 * w / g + dx * w,
            x1: roi.x0 + (gx + 1) as f64 * w / g + dx * w,
            y0: roi.y0 + gy as f64 * h / g + dy * h,
            y1: roi.y0 + (gy + 1) as f64 * h / g + dy * h,
            ..*roi
        }
    }
}

/// Sub-box owning output cell `idx` of `n`: the one containing the cell's sample point.
#[inline]
fn tile_of(idx: usize, n: usize, grid: usize) -> usize {
    ((2 * idx + 1) * grid / (2 * n)).min(grid - 1)
}

fn deformable_taps(roi: &RoiBox, offsets: &SubBoxOffsets, h: usize, w: usize, out: usize) -> Vec<(usize, Taps)> {
    let g = offsets.grid;
    let (bw, bh) = (roi.width(), roi.height());
    let mut grid = Vec::with_capacity(out * out);
    for i in 0..out {
        let ty = tile_of(i, out, g);
        let y = sample_coord(roi.y0, roi.y1, i, out);
        for j in 0..out {
            let tx = tile_of(j, out, g);
            let t = ty * g + tx;
            let [dx, dy] = offsets.offsets[t];
            let x = sample_coord(roi.x0, roi.x1, j, out);
            grid.push((t, taps(x + dx * bw, y + dy * bh, h, w)));
        }
    }
    grid
}

/// Continuous `(x, y)` sample point of every output cell of the deformable crop, row-major.
pub fn deformable_sample_points(roi: &RoiBox, offsets: &SubBoxOffsets, out: usize) -> Vec<(f64, f64)> {
    let g = offsets.grid;
    let (bw, bh) = (roi.width(), roi.height());
    let mut pts = Vec::with_capacity(out * out);
    for i in 0..out {
        let ty = tile_of(i, out, g);
        let y = sample_coord(roi.y0, roi.y1, i, out);
        for j in 0..out {
            let [dx, dy] = offsets.offsets[ty * g + tile_of(j, out, g)];
            pts.push((sample_coord(roi.x0, roi.x1, j, out) + dx * bw, y + dy * bh));
        }
    }
    pts
}

fn check_deformable(features: &Tensor4, roi: &RoiBox, offsets: &SubBoxOffsets, out: usize, first_out: usize) -> Result<()> {
    check_features(features, roi, out, out)?;
    let g = offsets.grid;
    if first_out < g || first_out % g != 0 {
        return arg_err(format!(
            "first-stage size {} is not divisible into a {}x{} sub-box grid",
            first_out, g, g
        ));
    }
    Ok(())
}

/// Two-stage deformable crop: the ROI is split into `G x G` equal sub-boxes, each sub-box is
/// translated by its offset (scaled by the ROI size), and each output tile is resampled from
/// its translated sub-box on the original features.
///
/// Every output cell samples exactly the point plain [`crop_and_resize`] would, shifted by its
/// sub-box's offset, so zero offsets reproduce the plain crop bit for bit.
pub fn deformable_crop_and_resize(
    features: &Tensor4,
    roi: &RoiBox,
    offsets: &SubBoxOffsets,
    out: usize,
    first_out: usize,
) -> Result<Tensor4> {
    check_deformable(features, roi, offsets, out, first_out)?;
    let grid = deformable_taps(roi, offsets, features.h(), features.w(), out);
    let mut res = Tensor4::zeros([1, features.c(), out, out]);
    for c in 0..features.c() {
        let plane = features.plane(0, c);
        let dst = res.plane_mut(0, c);
        for (d, (_, t)) in dst.iter_mut().zip(&grid) {
            *d = t.sample(plane);
        }
    }
    Ok(res)
}

/// Gradients of the deformable crop with respect to the features and the sub-box offsets.
pub struct DeformableGrads {
    pub features: Tensor4,
    pub offsets: Vec<[f64; 2]>,
}

pub fn deformable_crop_and_resize_backward(
    features: &Tensor4,
    roi: &RoiBox,
    offsets: &SubBoxOffsets,
    out: usize,
    first_out: usize,
    grad_out: &Tensor4,
) -> Result<DeformableGrads> {
    check_deformable(features, roi, offsets, out, first_out)?;
    if grad_out.shape() != [1, features.c(), out, out] {
        return shape_err(format!(
            "deformable grad {:?}, expected {:?}",
            grad_out.shape(),
            [1, features.c(), out, out]
        ));
    }
    let grid = deformable_taps(roi, offsets, features.h(), features.w(), out);
    let mut gf = Tensor4::zeros(features.shape());
    let mut goff = vec![[0.0; 2]; offsets.offsets.len()];
    let (bw, bh) = (roi.width(), roi.height());
    for c in 0..features.c() {
        let plane = features.plane(0, c);
        let go = grad_out.plane(0, c);
        for ((tile, t), &g) in grid.iter().zip(go) {
            if g == 0.0 {
                continue;
            }
            let (dfx, dfy) = t.coord_grad(plane);
            goff[*tile][0] += g * dfx * bw;
            goff[*tile][1] += g * dfy * bh;
        }
        let gp = gf.plane_mut(0, c);
        for ((_, t), &g) in grid.iter().zip(go) {
            if g != 0.0 {
                t.scatter(gp, g);
            }
        }
    }
    Ok(DeformableGrads {
        features: gf,
        offsets: goff,
    })
}

/// Region index of output cell `(i, j)` of an `out x out` direction pool.
///
/// The displacement from the box centre is measured in box-fraction units scaled so the box
/// edge lies at 1 on both axes; the normalised distance is the ratio of the cell's distance to
/// the distance from the centre to the box edge along the same ray.
#[inline]
pub fn pool_region(i: usize, j: usize, out: usize, cfg: &DirectionConfig) -> usize {
    // integer numerators keep diagonal and bin-edge cells exact
    let x = (2 * j + 1) as f64 - out as f64;
    let y = (2 * i + 1) as f64 - out as f64;
    region_index(x, y, x.abs().max(y.abs()) / out as f64, cfg)
}

fn check_pool(logits: &Tensor4, roi: &RoiBox, cfg: &DirectionConfig, out: usize) -> Result<()> {
    cfg.validate()?;
    check_features(logits, roi, out, out)?;
    if logits.c() != cfg.num_channels() {
        return shape_err(format!(
            "direction logits have {} channels, config needs {}",
            logits.c(),
            cfg.num_channels()
        ));
    }
    Ok(())
}

/// Assembles one `(1, 1, out, out)` map by copying each cell from the cropped channel that
/// encodes the cell's own direction sector and distance bin relative to the box centre.
pub fn direction_pool(logits: &Tensor4, roi: &RoiBox, cfg: &DirectionConfig, out: usize) -> Result<Tensor4> {
    check_pool(logits, roi, cfg, out)?;
    let grid = crop_taps(roi, logits.h(), logits.w(), out, out);
    let mut res = Tensor4::zeros([1, 1, out, out]);
    let dst = res.plane_mut(0, 0);
    for i in 0..out {
        for j in 0..out {
            let k = pool_region(i, j, out, cfg);
            dst[i * out + j] = grid[i * out + j].sample(logits.plane(0, k));
        }
    }
    Ok(res)
}

/// Adjoint of [`direction_pool`]; the channel selection is recomputed from the geometry.
pub fn direction_pool_backward_into(
    grad_logits: &mut Tensor4,
    roi: &RoiBox,
    cfg: &DirectionConfig,
    grad_out: &Tensor4,
) -> Result<()> {
    let out = grad_out.h();
    check_pool(grad_logits, roi, cfg, out)?;
    if grad_out.shape() != [1, 1, out, out] {
        return shape_err(format!("direction pool grad {:?} is not square single-channel", grad_out.shape()));
    }
    let grid = crop_taps(roi, grad_logits.h(), grad_logits.w(), out, out);
    let go = grad_out.plane(0, 0);
    for i in 0..out {
        for j in 0..out {
            let g = go[i * out + j];
            if g != 0.0 {
                let k = pool_region(i, j, out, cfg);
                grid[i * out + j].scatter(grad_logits.plane_mut(0, k), g);
            }
        }
    }
    Ok(())
}

pub fn direction_pool_backward(
    logits: &Tensor4,
    roi: &RoiBox,
    cfg: &DirectionConfig,
    grad_out: &Tensor4,
) -> Result<Tensor4> {
    let mut g = Tensor4::zeros(logits.shape());
    direction_pool_backward_into(&mut g, roi, cfg, grad_out)?;
    Ok(g)
}
