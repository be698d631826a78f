//! Deterministic synthetic scenes and oracle logits bundles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::direction::{add_noise, encode_direction_labels, oracle_direction_logits, DirectionConfig};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::heads::LogitsBundle;
use crate::mask::Mask;
use crate::roi::RoiBox;
use crate::tensor::Tensor4;

pub const DISK: usize = 1;
pub const RECTANGLE: usize = 2;
pub const TRIANGLE: usize = 3;

/// Oracle logit magnitudes.
pub const HOT: f64 = 3.0;
pub const COLD: f64 = -3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub label: usize,
    pub mask: Mask,
    /// Tight box of `mask`; degenerate at the origin for an empty mask.
    pub bbox: RoiBox,
}

impl Instance {
    pub fn new(label: usize, mask: Mask) -> Self {
        let bbox = mask.tight_box(label, 1.0).unwrap_or(RoiBox {
            x0: 0.0,
            y0: 0.0,
            x1: 0.0,
            y1: 0.0,
            label,
            score: 1.0,
        });
        Self { label, mask, bbox }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `(1, 3, H, W)` with values in `[0, 1]`.
    pub image: Tensor4,
    pub instances: Vec<Instance>,
    pub seed: u64,
    pub index: usize,
    pub num_classes: usize,
}

impl Scene {
    /// A scene with a black image sized after the first mask (0x0 when there are none).
    pub fn from_instances(instances: Vec<Instance>, num_classes: usize, seed: u64, index: usize) -> Self {
        let (h, w) = instances
            .first()
            .map(|i| (i.mask.height(), i.mask.width()))
            .unwrap_or((0, 0));
        Self {
            image: Tensor4::zeros([1, 3, h, w]),
            instances,
            seed,
            index,
            num_classes,
        }
    }

    pub fn with_size(mut self, h: usize, w: usize) -> Self {
        self.image = Tensor4::zeros([1, 3, h, w]);
        self
    }

    pub fn height(&self) -> usize {
        self.image.h()
    }

    pub fn width(&self) -> usize {
        self.image.w()
    }

    /// Per-pixel class labels, 0 for background.
    pub fn class_map(&self) -> Vec<usize> {
        let mut map = vec![0; self.height() * self.width()];
        for inst in &self.instances {
            for (m, &on) in map.iter_mut().zip(inst.mask.data()) {
                if on {
                    *m = inst.label;
                }
            }
        }
        map
    }

    pub fn gt_boxes(&self) -> Vec<RoiBox> {
        self.instances.iter().map(|i| i.bbox).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if self.image.shape() != [1, 3, h, w] {
            return shape_err(format!("scene image has shape {:?}", self.image.shape()));
        }
        let mut seen = Mask::new(h, w);
        for inst in &self.instances {
            if inst.mask.height() != h || inst.mask.width() != w {
                return shape_err("instance mask does not match the image size");
            }
            if inst.label == 0 || inst.label >= self.num_classes {
                return arg_err(format!("instance label {} outside [1, {})", inst.label, self.num_classes));
            }
            if inst.mask.intersects(&seen) {
                return arg_err("instance masks overlap");
            }
            seen.union_with(&inst.mask);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Disks, rectangles and triangles placed without overlap.
    Shapes,
    /// Two same-class disks, the second partially covering the first. Visible masks stay
    /// disjoint, but the two instances form one connected semantic blob.
    TwoDisk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Including background; shapes use classes `1..num_classes` (at most three).
    pub num_classes: usize,
    pub layout: Layout,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            min_shapes: 2,
            max_shapes: 5,
            min_radius: 8.0,
            max_radius: 20.0,
            num_classes: 4,
            layout: Layout::Shapes,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Small two-disk scenes used by the ablation harness.
    pub fn two_disk() -> Self {
        Self {
            height: 40,
            width: 40,
            min_shapes: 2,
            max_shapes: 2,
            min_radius: 7.0,
            max_radius: 10.0,
            num_classes: 2,
            layout: Layout::TwoDisk,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 4 {
            return arg_err(format!("num_classes {} outside [2, 4]", self.num_classes));
        }
        if self.min_shapes > self.max_shapes {
            return arg_err("min_shapes exceeds max_shapes");
        }
        if !(self.min_radius >= 1.0 && self.min_radius <= self.max_radius) || !self.max_radius.is_finite() {
            return arg_err(format!("bad radius range [{}, {}]", self.min_radius, self.max_radius));
        }
        if 2.0 * self.max_radius + 2.0 > self.height.min(self.width) as f64 {
            return arg_err("max_radius does not fit the image");
        }
        Ok(())
    }
}

const MAX_ATTEMPTS: usize = 1000;

pub fn rasterize_disk(h: usize, w: usize, cx: f64, cy: f64, r: f64) -> Mask {
    Mask::from_fn(h, w, |y, x| {
        let dx = x as f64 + 0.5 - cx;
        let dy = y as f64 + 0.5 - cy;
        dx * dx + dy * dy <= r * r
    })
}

pub fn rasterize_rect(h: usize, w: usize, cx: f64, cy: f64, half_w: f64, half_h: f64) -> Mask {
    Mask::from_fn(h, w, |y, x| {
        (x as f64 + 0.5 - cx).abs() <= half_w && (y as f64 + 0.5 - cy).abs() <= half_h
    })
}

pub fn rasterize_triangle(h: usize, w: usize, v: [(f64, f64); 3]) -> Mask {
    let edge = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    Mask::from_fn(h, w, |y, x| {
        let p = (x as f64 + 0.5, y as f64 + 0.5);
        let e = [edge(v[0], v[1], p), edge(v[1], v[2], p), edge(v[2], v[0], p)];
        e.iter().all(|&s| s >= 0.0) || e.iter().all(|&s| s <= 0.0)
    })
}

fn random_shape(cfg: &SynthConfig, label: usize, rng: &mut ChaCha8Rng) -> Mask {
    let (h, w) = (cfg.height, cfg.width);
    let r = rng.random_range(cfg.min_radius..=cfg.max_radius);
    let cx = rng.random_range(r + 1.0..=w as f64 - r - 1.0);
    let cy = rng.random_range(r + 1.0..=h as f64 - r - 1.0);
    match label {
        DISK => rasterize_disk(h, w, cx, cy, r),
        RECTANGLE => {
            let hw = r * rng.random_range(0.6..=1.0);
            let hh = r * rng.random_range(0.6..=1.0);
            rasterize_rect(h, w, cx, cy, hw, hh)
        }
        _ => {
            let spread = rng.random_range(0.8..=1.0);
            let flip = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
            rasterize_triangle(
                h,
                w,
                [
                    (cx, cy - flip * r),
                    (cx - spread * r, cy + flip * 0.8 * r),
                    (cx + spread * r, cy + flip * 0.8 * r),
                ],
            )
        }
    }
}

fn place_shapes(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Instance>> {
    let n = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let max_label = (cfg.num_classes - 1).min(TRIANGLE);
    let mut occupied = Mask::new(cfg.height, cfg.width);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let label = rng.random_range(1..=max_label);
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let mask = random_shape(cfg, label, rng);
            // one pixel of clearance keeps neighbouring instances from touching
            if mask.is_empty() || mask.dilate(1).intersects(&occupied) {
                continue;
            }
            occupied.union_with(&mask);
            out.push(Instance::new(label, mask));
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place shape {} of {} within {} attempts",
                k + 1,
                n,
                MAX_ATTEMPTS
            )));
        }
    }
    Ok(out)
}

fn place_two_disks(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Instance>> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    for _ in 0..MAX_ATTEMPTS {
        let r1 = rng.random_range(cfg.min_radius..=cfg.max_radius);
        let r2 = rng.random_range(cfg.min_radius..=cfg.max_radius);
        let c1 = (rng.random_range(r1 + 1.0..=w - r1 - 1.0), rng.random_range(r1 + 1.0..=h - r1 - 1.0));
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let d = rng.random_range(0.35..=0.6) * (r1 + r2);
        let c2 = (c1.0 + d * theta.cos(), c1.1 + d * theta.sin());
        if c2.0 < r2 + 1.0 || c2.0 > w - r2 - 1.0 || c2.1 < r2 + 1.0 || c2.1 > h - r2 - 1.0 {
            continue;
        }
        let back = rasterize_disk(cfg.height, cfg.width, c1.0, c1.1, r1);
        let front = rasterize_disk(cfg.height, cfg.width, c2.0, c2.1, r2);
        let visible = Mask::from_fn(cfg.height, cfg.width, |y, x| back.get(y, x) && !front.get(y, x));
        if (visible.count() as f64) < 0.4 * back.count() as f64 {
            continue;
        }
        return Ok(vec![Instance::new(DISK, visible), Instance::new(DISK, front)]);
    }
    Err(Error::Generation(format!(
        "could not place two overlapping disks within {} attempts",
        MAX_ATTEMPTS
    )))
}

const CLASS_COLORS: [[f64; 3]; 4] = [[0.5, 0.5, 0.5], [0.85, 0.2, 0.2], [0.2, 0.8, 0.25], [0.2, 0.3, 0.85]];

fn render(cfg: &SynthConfig, instances: &[Instance], rng: &mut ChaCha8Rng) -> Tensor4 {
    let (h, w) = (cfg.height, cfg.width);
    let phase = [rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU)];
    let tint: Vec<f64> = (0..3).map(|_| rng.random_range(-0.05..=0.05)).collect();
    let colors: Vec<[f64; 3]> = instances
        .iter()
        .map(|inst| {
            let base = CLASS_COLORS[inst.label.min(3)];
            [0, 1, 2].map(|c| base[c] + rng.random_range(-0.08..=0.08))
        })
        .collect();
    let mut owner = vec![usize::MAX; h * w];
    for (k, inst) in instances.iter().enumerate() {
        for (o, &on) in owner.iter_mut().zip(inst.mask.data()) {
            if on {
                *o = k;
            }
        }
    }
    let mut img = Tensor4::zeros([1, 3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let o = owner[y * w + x];
            let noise: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-0.02..=0.02));
            for c in 0..3 {
                let v = if o == usize::MAX {
                    let tex = 0.08 * (0.21 * x as f64 + phase[0]).sin() * (0.17 * y as f64 + phase[1]).cos();
                    0.45 + tint[c] + tex + noise[c]
                } else {
                    colors[o][c] + noise[c]
                };
                img.set(0, c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Scene `index` of the dataset described by `cfg`; a pure function of both.
pub fn generate_scene(cfg: &SynthConfig, index: usize) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let instances = match cfg.layout {
        Layout::Shapes => place_shapes(cfg, &mut rng)?,
        Layout::TwoDisk => place_two_disks(cfg, &mut rng)?,
    };
    let image = render(cfg, &instances, &mut rng);
    Ok(Scene {
        image,
        instances,
        seed: cfg.seed,
        index,
        num_classes: cfg.num_classes,
    })
}

pub fn generate_scenes(cfg: &SynthConfig, start: usize, count: usize) -> Result<Vec<Scene>> {
    (start..start + count).map(|i| generate_scene(cfg, i)).collect()
}

/// Mean-intensity map and its Sobel gradient magnitude, each `(1, 1, H, W)`.
pub fn image_hypercolumns(image: &Tensor4) -> (Tensor4, Tensor4) {
    let (h, w) = (image.h(), image.w());
    let intensity = Tensor4::from_fn([1, 1, h, w], |_, _, y, x| {
        (0..image.c()).map(|c| image.get(0, c, y, x)).sum::<f64>() / image.c().max(1) as f64
    });
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        intensity.get(0, 0, yy, xx)
    };
    let edges = Tensor4::from_fn([1, 1, h, w], |_, _, y, x| {
        let (y, x) = (y as isize, x as isize);
        let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
            - at(y - 1, x - 1)
            - 2.0 * at(y, x - 1)
            - at(y + 1, x - 1);
        let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
            - at(y - 1, x - 1)
            - 2.0 * at(y - 1, x)
            - at(y - 1, x + 1);
        (gx * gx + gy * gy).sqrt()
    });
    (intensity, edges)
}

/// Logits synthesized from ground truth: semantic channel k hot on class-k pixels and the
/// background channel hot elsewhere, direction logits hot on each pixel's region channel,
/// plus Gaussian noise. Hypercolumns are the image intensity and edge maps.
pub fn oracle_bundle(scene: &Scene, cfg: &DirectionConfig, noise_sigma: f64, seed: u64) -> Result<LogitsBundle> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return arg_err(format!("noise sigma {} must be finite and non-negative", noise_sigma));
    }
    let (h, w) = (scene.height(), scene.width());
    let classes = scene.class_map();
    let mut semantic = Tensor4::full([1, scene.num_classes, h, w], COLD);
    for (p, &k) in classes.iter().enumerate() {
        semantic.data_mut()[k * h * w + p] = HOT;
    }
    add_noise(&mut semantic, noise_sigma, seed);
    let labels = encode_direction_labels(scene, cfg)?;
    let direction = oracle_direction_logits(&labels, cfg, HOT, COLD, noise_sigma, seed.wrapping_add(1))?;
    let (intensity, edges) = image_hypercolumns(&scene.image);
    Ok(LogitsBundle {
        semantic,
        direction,
        hypercolumns: vec![intensity, edges],
        stride: 1,
    })
}
