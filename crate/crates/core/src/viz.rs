//! Binary PPM (P6) images of scenes, logits, direction labels, pooled maps and masks.

use std::path::Path;

use crate::direction::{DirectionConfig, DirectionLabelMap};
use crate::error::{shape_err, Result};
use crate::roi::{pool_region, RoiBox, SubBoxOffsets};
use crate::tensor::{sigmoid_scalar, Tensor4};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![[0; 3]; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.pixels[y * width + x] = f(y, x);
            }
        }
        img
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, c: [u8; 3]) {
        if y < self.height && x < self.width {
            self.pixels[y * self.width + x] = c;
        }
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upscale(&self, k: usize) -> Self {
        let k = k.max(1);
        Self::from_fn(self.width * k, self.height * k, |y, x| self.get(y / k, x / k))
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_ppm())?)
    }

    /// Outline of a continuous box (pixel-edge coordinates) scaled by `k`.
    pub fn draw_box(&mut self, b: &RoiBox, k: usize, color: [u8; 3]) {
        let s = k as f64;
        let x0 = (b.x0 * s).floor().max(0.0) as usize;
        let y0 = (b.y0 * s).floor().max(0.0) as usize;
        let x1 = ((b.x1 * s).ceil().max(1.0) as usize - 1).min(self.width.saturating_sub(1));
        let y1 = ((b.y1 * s).ceil().max(1.0) as usize - 1).min(self.height.saturating_sub(1));
        for x in x0..=x1 {
            self.set(y0, x, color);
            self.set(y1, x, color);
        }
        for y in y0..=y1 {
            self.set(y, x0, color);
            self.set(y, x1, color);
        }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [to_u8(r + m), to_u8(g + m), to_u8(b + m)]
}

/// Distinct colour for a small integer id (0 is black).
pub fn palette(i: usize) -> [u8; 3] {
    if i == 0 {
        return [0, 0, 0];
    }
    // golden-ratio hue steps keep neighbouring ids apart
    hsv(i as f64 * 0.618_033_988_75, 0.75, 0.95)
}

/// Colour wheel over direction sectors; outer distance bins are darker.
pub fn region_color(region: usize, cfg: &DirectionConfig) -> [u8; 3] {
    let sector = region / cfg.num_distance_bins;
    let bin = region % cfg.num_distance_bins;
    let v = 1.0 - 0.6 * bin as f64 / cfg.num_distance_bins.max(2) as f64;
    hsv(sector as f64 / cfg.num_directions as f64, 0.85, v)
}

pub fn image_rgb(image: &Tensor4) -> Result<RgbImage> {
    if image.n() != 1 || image.c() != 3 {
        return shape_err(format!("expected a (1, 3, H, W) image, got {:?}", image.shape()));
    }
    Ok(RgbImage::from_fn(image.w(), image.h(), |y, x| {
        [0, 1, 2].map(|c| to_u8(image.get(0, c, y, x)))
    }))
}

pub fn argmax_channels(t: &Tensor4) -> Vec<usize> {
    let hw = t.h() * t.w();
    (0..hw)
        .map(|p| {
            (0..t.c())
                .max_by(|&a, &b| t.data()[a * hw + p].total_cmp(&t.data()[b * hw + p]))
                .unwrap_or(0)
        })
        .collect()
}

pub fn semantic_argmax_rgb(semantic: &Tensor4) -> RgbImage {
    let am = argmax_channels(semantic);
    RgbImage::from_fn(semantic.w(), semantic.h(), |y, x| palette(am[y * semantic.w() + x]))
}

pub fn direction_labels_rgb(labels: &DirectionLabelMap, cfg: &DirectionConfig) -> RgbImage {
    RgbImage::from_fn(labels.w, labels.h, |y, x| match labels.get(y, x) {
        l if l < 0 => [0, 0, 0],
        l => region_color(l as usize, cfg),
    })
}

/// Predicted direction labels: direction argmax where the semantic argmax is foreground.
pub fn predicted_direction_labels(semantic: &Tensor4, direction: &Tensor4) -> DirectionLabelMap {
    let sem = argmax_channels(semantic);
    let dir = argmax_channels(direction);
    DirectionLabelMap {
        h: semantic.h(),
        w: semantic.w(),
        labels: sem.iter().zip(&dir).map(|(&s, &d)| if s == 0 { -1 } else { d as i32 }).collect(),
    }
}

/// Assembled direction-pool map of one box: each cell shows its region's colour scaled by the
/// sigmoid of the pooled logit.
pub fn pooled_rgb(pooled: &Tensor4, cfg: &DirectionConfig) -> RgbImage {
    let out = pooled.h();
    RgbImage::from_fn(out, out, |i, j| {
        let c = region_color(pool_region(i, j, out, cfg), cfg);
        let s = sigmoid_scalar(pooled.get(0, 0, i, j));
        c.map(|v| (v as f64 * s).round() as u8)
    })
}

pub fn probability_rgb(probs: &Tensor4) -> RgbImage {
    RgbImage::from_fn(probs.w(), probs.h(), |i, j| [to_u8(probs.get(0, 0, i, j)); 3])
}

pub fn mask_rgb(mask: &crate::mask::Mask) -> RgbImage {
    RgbImage::from_fn(mask.width(), mask.height(), |y, x| if mask.get(y, x) { [255; 3] } else { [0; 3] })
}

/// The image enlarged by `k` with the box in white and each deformed sub-box outlined in its
/// tile's colour.
pub fn sub_box_overlay(base: &RgbImage, roi: &RoiBox, offsets: &SubBoxOffsets, k: usize) -> RgbImage {
    let mut img = base.upscale(k);
    img.draw_box(roi, k, [255, 255, 255]);
    let g = offsets.grid();
    for gy in 0..g {
        for gx in 0..g {
            img.draw_box(&offsets.deformed_sub_box(roi, gy, gx), k, palette(gy * g + gx + 1));
        }
    }
    img
}
