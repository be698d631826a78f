//! Direction-toward-center labels: sector/distance-bin geometry and ground-truth encoding.
//!
//! Angles follow `atan2(-dy, dx)` in image coordinates (y down), so sector 0 starts on the
//! +x axis and sectors advance counter-clockwise as displayed. A displacement is assigned to
//! sector `floor(angle / (360 / D))`, which sends exact sector boundaries to the higher sector.

use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::mask::Mask;
use crate::synth::Scene;
use crate::tensor::Tensor4;

/// Reference frame used to place a pixel relative to its instance when encoding labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterFrame {
    /// Tight-box center; angles and distances measured in box-fraction coordinates with the
    /// box edge at distance 1. This is the frame direction pooling uses at inference time.
    Box,
    /// Mask centroid; Euclidean distance normalised by the instance's largest
    /// center-to-pixel radius.
    Centroid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "DirectionConfigDoc")]
pub struct DirectionConfig {
    pub num_directions: usize,
    pub num_distance_bins: usize,
    /// `num_distance_bins - 1` strictly ascending cut points in (0, 1).
    pub bin_fractions: Vec<f64>,
    pub frame: CenterFrame,
}

/// Serialized form: every field optional, `bin_fractions` defaulting to equal-width bins.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DirectionConfigDoc {
    num_directions: Option<usize>,
    num_distance_bins: Option<usize>,
    bin_fractions: Option<Vec<f64>>,
    frame: Option<CenterFrame>,
}

impl From<DirectionConfigDoc> for DirectionConfig {
    fn from(d: DirectionConfigDoc) -> Self {
        let base = DirectionConfig::default();
        let mut cfg = DirectionConfig::new(
            d.num_directions.unwrap_or(base.num_directions),
            d.num_distance_bins.unwrap_or(base.num_distance_bins),
        )
        .with_frame(d.frame.unwrap_or(base.frame));
        if let Some(f) = d.bin_fractions {
            cfg.bin_fractions = f;
        }
        cfg
    }
}

impl Default for DirectionConfig {
    fn default() -> Self {
        Self::new(8, 4)
    }
}

impl DirectionConfig {
    /// `D` sectors and `B` equal-width distance bins.
    pub fn new(num_directions: usize, num_distance_bins: usize) -> Self {
        let bin_fractions = (1..num_distance_bins)
            .map(|i| i as f64 / num_distance_bins as f64)
            .collect();
        Self {
            num_directions,
            num_distance_bins,
            bin_fractions,
            frame: CenterFrame::Box,
        }
    }

    pub fn with_frame(mut self, frame: CenterFrame) -> Self {
        self.frame = frame;
        self
    }

    pub fn num_channels(&self) -> usize {
        self.num_directions * self.num_distance_bins
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_directions == 0 || self.num_distance_bins == 0 {
            return arg_err("direction and distance-bin counts must be positive");
        }
        if self.bin_fractions.len() + 1 != self.num_distance_bins {
            return arg_err(format!(
                "{} distance bins need {} fractions, got {}",
                self.num_distance_bins,
                self.num_distance_bins - 1,
                self.bin_fractions.len()
            ));
        }
        let mut prev = 0.0;
        for &f in &self.bin_fractions {
            if !(f > prev && f < 1.0) {
                return arg_err(format!(
                    "bin fractions must ascend strictly within (0, 1): {:?}",
                    self.bin_fractions
                ));
            }
            prev = f;
        }
        Ok(())
    }
}

/// Sector of the displacement `(dx, dy)` among `num_directions` equal sectors.
#[inline]
pub fn sector_index(dx: f64, dy: f64, num_directions: usize) -> usize {
    if let Some(o) = exact_octant(dx, -dy) {
        return o * num_directions / 8;
    }
    let mut turns = (-dy).atan2(dx) / TAU;
    if turns < 0.0 {
        turns += 1.0;
    }
    ((turns * num_directions as f64).floor() as usize).min(num_directions - 1)
}

/// Octant of a direction lying exactly on a multiple of 45 degrees (y up), so boundary
/// directions get the floor rule without rounding in `atan2`.
fn exact_octant(x: f64, y: f64) -> Option<usize> {
    if !(x == 0.0 || y == 0.0 || x.abs() == y.abs()) {
        return None;
    }
    let sign = |v: f64| (v > 0.0) as i8 - (v < 0.0) as i8;
    match (sign(x), sign(y)) {
        (1, 0) => Some(0),
        (1, 1) => Some(1),
        (0, 1) => Some(2),
        (-1, 1) => Some(3),
        (-1, 0) => Some(4),
        (-1, -1) => Some(5),
        (0, -1) => Some(6),
        (1, -1) => Some(7),
        _ => None,
    }
}

/// Number of cut points strictly below `rho` (clamped to 1).
#[inline]
pub fn distance_bin_index(rho: f64, fractions: &[f64]) -> usize {
    let rho = rho.min(1.0);
    fractions.iter().filter(|&&f| f < rho).count()
}

/// Combined region index `sector * B + bin` for a displacement with normalised distance `rho`.
/// The zero displacement maps to region 0.
#[inline]
pub fn region_index(dx: f64, dy: f64, rho: f64, cfg: &DirectionConfig) -> usize {
    if dx == 0.0 && dy == 0.0 {
        return 0;
    }
    sector_index(dx, dy, cfg.num_directions) * cfg.num_distance_bins
        + distance_bin_index(rho, &cfg.bin_fractions)
}

/// Region index of `(dx, dy)` with distance normalised by `max_radius`.
pub fn direction_bin(dx: f64, dy: f64, max_radius: f64, cfg: &DirectionConfig) -> Result<usize> {
    if !(max_radius > 0.0) || !max_radius.is_finite() {
        return arg_err(format!("max_radius {} must be positive", max_radius));
    }
    if !dx.is_finite() || !dy.is_finite() {
        return arg_err("displacement must be finite");
    }
    Ok(region_index(dx, dy, dx.hypot(dy) / max_radius, cfg))
}

/// Centre of mass of the foreground, with pixel centres at integer + 0.5. Returns `(cx, cy)`.
pub fn instance_center(mask: &Mask) -> Result<(f64, f64)> {
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut n = 0usize;
    for (y, x) in mask.foreground() {
        sx += x as f64 + 0.5;
        sy += y as f64 + 0.5;
        n += 1;
    }
    if n == 0 {
        return arg_err("instance_center of an empty mask");
    }
    Ok((sx / n as f64, sy / n as f64))
}

/// Per-pixel region labels; `-1` marks pixels that belong to no instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirectionLabelMap {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<i32>,
}

impl DirectionLabelMap {
    pub fn background(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            labels: vec![-1; h * w],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> i32 {
        self.labels[y * self.w + x]
    }

    pub fn to_tensor(&self) -> Tensor4 {
        Tensor4::from_fn([1, 1, self.h, self.w], |_, _, y, x| self.get(y, x) as f64)
    }

    pub fn from_tensor(t: &Tensor4, cfg: &DirectionConfig) -> Result<Self> {
        let [n, c, h, w] = t.shape();
        if n != 1 || c != 1 {
            return Err(Error::Shape(format!("label map tensor must be (1,1,h,w), got {:?}", t.shape())));
        }
        let max = cfg.num_channels() as f64;
        let mut labels = Vec::with_capacity(h * w);
        for &v in t.data() {
            if v.fract() != 0.0 || v < -1.0 || v >= max {
                return Err(Error::Format(format!("label value {} out of range", v)));
            }
            labels.push(v as i32);
        }
        Ok(Self { h, w, labels })
    }
}

/// Labels one instance's foreground pixels relative to its own frame.
pub fn encode_instance(mask: &Mask, cfg: &DirectionConfig, out: &mut DirectionLabelMap) -> Result<()> {
    match cfg.frame {
        CenterFrame::Centroid => {
            let (cx, cy) = instance_center(mask)?;
            let max_radius = mask
                .foreground()
                .map(|(y, x)| (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy))
                .fold(0.0, f64::max)
                .max(1.0);
            for (y, x) in mask.foreground() {
                let k = direction_bin(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, max_radius, cfg)?;
                out.labels[y * out.w + x] = k as i32;
            }
        }
        CenterFrame::Box => {
            let b = mask
                .tight_box(0, 1.0)
                .ok_or_else(|| Error::InvalidArgument("cannot encode an empty instance mask".into()))?;
            let (cx, cy) = b.center();
            let (hw, hh) = (b.width() / 2.0, b.height() / 2.0);
            for (y, x) in mask.foreground() {
                let a = (x as f64 + 0.5 - cx) / hw;
                let c = (y as f64 + 0.5 - cy) / hh;
                let k = region_index(a, c, a.abs().max(c.abs()), cfg);
                out.labels[y * out.w + x] = k as i32;
            }
        }
    }
    Ok(())
}

/// Ground-truth direction labels for every instance of `scene`.
pub fn encode_direction_labels(scene: &Scene, cfg: &DirectionConfig) -> Result<DirectionLabelMap> {
    cfg.validate()?;
    let (h, w) = (scene.height(), scene.width());
    let mut occupied = Mask::new(h, w);
    for inst in &scene.instances {
        if !inst.mask.same_dims(&occupied) {
            return Err(Error::Shape("instance mask does not match scene size".into()));
        }
        if inst.mask.intersects(&occupied) {
            return arg_err("instance masks overlap; direction labels would be ambiguous");
        }
        occupied.union_with(&inst.mask);
    }
    let mut out = DirectionLabelMap::background(h, w);
    for inst in &scene.instances {
        encode_instance(&inst.mask, cfg, &mut out)?;
    }
    Ok(out)
}

/// Synthetic direction logits: `hot` on each pixel's labelled channel, `cold` elsewhere, plus
/// seeded Gaussian noise of scale `noise_sigma`.
pub fn oracle_direction_logits(
    labels: &DirectionLabelMap,
    cfg: &DirectionConfig,
    hot: f64,
    cold: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Tensor4> {
    if !(hot > cold) {
        return arg_err(format!("hot ({}) must exceed cold ({})", hot, cold));
    }
    if !(noise_sigma >= 0.0) {
        return arg_err("noise_sigma must be non-negative");
    }
    let ch = cfg.num_channels();
    let (h, w) = (labels.h, labels.w);
    let mut t = Tensor4::full([1, ch, h, w], cold);
    for (p, &l) in labels.labels.iter().enumerate() {
        if l >= 0 {
            if l as usize >= ch {
                return arg_err(format!("label {} exceeds {} channels", l, ch));
            }
            t.data_mut()[l as usize * h * w + p] = hot;
        }
    }
    add_noise(&mut t, noise_sigma, seed);
    Ok(t)
}

pub(crate) fn add_noise(t: &mut Tensor4, sigma: f64, seed: u64) {
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).expect("sigma checked positive");
        for v in t.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{Instance, Scene};

    fn centroid_cfg(d: usize, b: usize) -> DirectionConfig {
        DirectionConfig::new(d, b).with_frame(CenterFrame::Centroid)
    }

    fn disk(h: usize, w: usize, cx: f64, cy: f64, r: f64) -> Mask {
        Mask::from_fn(h, w, |y, x| {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            dx * dx + dy * dy <= r * r
        })
    }

    #[test]
    fn default_has_32_channels() {
        let cfg = DirectionConfig::default();
        assert_eq!(cfg.num_channels(), 32);
        assert_eq!(cfg.bin_fractions, vec![0.25, 0.5, 0.75]);
        cfg.validate().unwrap();
    }

    #[test]
    fn validate_rejects_bad_fractions() {
        let mut cfg = DirectionConfig::new(8, 3);
        cfg.bin_fractions = vec![0.6, 0.3];
        assert!(cfg.validate().is_err());
        cfg.bin_fractions = vec![0.5];
        assert!(cfg.validate().is_err());
        assert!(DirectionConfig::new(0, 1).validate().is_err());
    }

    #[test]
    fn center_examples() {
        let mut m = Mask::new(8, 8);
        m.set(3, 5, true);
        assert_eq!(instance_center(&m).unwrap(), (5.5, 3.5));
        let full = Mask::from_fn(4, 4, |_, _| true);
        assert_eq!(instance_center(&full).unwrap(), (2.0, 2.0));
        let mut l = Mask::new(3, 3);
        l.set(0, 0, true);
        l.set(1, 0, true);
        l.set(1, 1, true);
        let (cx, cy) = instance_center(&l).unwrap();
        // arithmetic mean of x centres {0.5, 0.5, 1.5} and y centres {0.5, 1.5, 1.5}
        assert!((cx - (0.5 + 0.5 + 1.5) / 3.0).abs() < 1e-15);
        assert!((cy - (0.5 + 1.5 + 1.5) / 3.0).abs() < 1e-15);
        assert!((cx - 0.833_333_333_333_333_4).abs() < 1e-12);
        assert!((cy - 1.166_666_666_666_666_7).abs() < 1e-12);
        assert!(instance_center(&Mask::new(2, 2)).is_err());
    }

    #[test]
    fn direction_bin_examples() {
        let cfg = DirectionConfig::default();
        assert_eq!(direction_bin(1.0, 0.0, 100.0, &cfg).unwrap(), 0);
        // above centre (angle 90deg), rho 0.9 -> sector 2, bin 3
        assert_eq!(direction_bin(0.0, -0.9, 1.0, &cfg).unwrap(), 11);
        let one_bin = DirectionConfig::new(8, 1);
        assert_eq!(direction_bin(-1.0, 0.0, 1.0, &one_bin).unwrap(), 4);
        assert_eq!(direction_bin(-1.0, 0.0, 100.0, &one_bin).unwrap(), 4);
        assert_eq!(direction_bin(0.0, 0.0, 1.0, &cfg).unwrap(), 0);
        assert!(direction_bin(1.0, 0.0, 0.0, &cfg).is_err());
        assert!(direction_bin(1.0, 0.0, -1.0, &cfg).is_err());
    }

    #[test]
    fn bins_at_extremes() {
        let cfg = DirectionConfig::default();
        assert_eq!(distance_bin_index(0.0, &cfg.bin_fractions), 0);
        assert_eq!(distance_bin_index(1.0, &cfg.bin_fractions), 3);
        assert_eq!(distance_bin_index(7.0, &cfg.bin_fractions), 3);
        // cut points themselves belong to the lower bin ("strictly below")
        assert_eq!(distance_bin_index(0.5, &cfg.bin_fractions), 1);
    }

    #[test]
    fn boundary_angles_go_to_higher_sector() {
        // 45 degrees exactly, D = 8
        assert_eq!(sector_index(1.0, -1.0, 8), 1);
        // 90 degrees, D = 4
        assert_eq!(sector_index(0.0, -1.0, 4), 1);
        // 180 and 270 degrees
        assert_eq!(sector_index(-1.0, 0.0, 8), 4);
        assert_eq!(sector_index(0.0, 1.0, 8), 6);
        // just below 360 stays in the last sector
        assert_eq!(sector_index(1.0, 1e-12, 8), 7);
        // every diagonal is exact, whatever its length
        for (dx, dy, s) in [(3.0, -3.0, 1), (-7.0, -7.0, 3), (-0.1, 0.1, 5), (13.0, 13.0, 7)] {
            assert_eq!(sector_index(dx, dy, 8), s);
        }
        assert_eq!(sector_index(-5.0, -5.0, 4), 1);
        assert_eq!(sector_index(-5.0, -5.0, 6), 2);
    }

    #[test]
    fn centered_disk_wedges_are_balanced() {
        for frame in [CenterFrame::Centroid, CenterFrame::Box] {
            let cfg = DirectionConfig::new(8, 1).with_frame(frame);
            let m = disk(64, 64, 32.0, 32.0, 22.0);
            let scene = Scene::from_instances(vec![Instance::new(1, m.clone())], 4, 0, 0);
            let labels = encode_direction_labels(&scene, &cfg).unwrap();
            let mut counts = [0usize; 8];
            for &l in &labels.labels {
                if l >= 0 {
                    counts[l as usize] += 1;
                }
            }
            let expect = m.count() as f64 / 8.0;
            for c in counts {
                assert!((c as f64 - expect).abs() <= 0.15 * expect, "{:?}", counts);
            }
        }
    }

    #[test]
    fn empty_scene_is_all_background() {
        let scene = Scene::from_instances(vec![], 4, 0, 0).with_size(5, 7);
        let labels = encode_direction_labels(&scene, &DirectionConfig::default()).unwrap();
        assert_eq!(labels.labels.len(), 35);
        assert!(labels.labels.iter().all(|&l| l == -1));
    }

    #[test]
    fn labels_are_per_instance_local() {
        let a = disk(48, 64, 14.0, 20.0, 9.0);
        let b = disk(48, 64, 44.0, 26.0, 12.0);
        for cfg in [DirectionConfig::default(), centroid_cfg(8, 4)] {
            let both = Scene::from_instances(vec![Instance::new(1, a.clone()), Instance::new(1, b.clone())], 4, 0, 0);
            let only_a = Scene::from_instances(vec![Instance::new(1, a.clone())], 4, 0, 0);
            let lb = encode_direction_labels(&both, &cfg).unwrap();
            let la = encode_direction_labels(&only_a, &cfg).unwrap();
            for (y, x) in a.foreground() {
                assert_eq!(lb.get(y, x), la.get(y, x));
            }
        }
    }

    #[test]
    fn overlapping_instances_rejected() {
        let a = disk(32, 32, 12.0, 12.0, 6.0);
        let b = disk(32, 32, 16.0, 12.0, 6.0);
        let s = Scene::from_instances(vec![Instance::new(1, a), Instance::new(2, b)], 4, 0, 0);
        assert!(encode_direction_labels(&s, &DirectionConfig::default()).is_err());
    }

    #[test]
    fn oracle_logits_construction() {
        let m = disk(24, 24, 12.0, 12.0, 8.0);
        let s = Scene::from_instances(vec![Instance::new(1, m.clone())], 4, 0, 0);
        let cfg = DirectionConfig::default();
        let labels = encode_direction_labels(&s, &cfg).unwrap();
        let t = oracle_direction_logits(&labels, &cfg, 1.0, -1.0, 0.0, 3).unwrap();
        for (y, x) in m.foreground() {
            let argmax = (0..32)
                .max_by(|&a, &b| t.get(0, a, y, x).total_cmp(&t.get(0, b, y, x)))
                .unwrap();
            assert_eq!(argmax as i32, labels.get(y, x));
        }
        let bg = DirectionLabelMap::background(4, 4);
        let t = oracle_direction_logits(&bg, &cfg, 1.0, -1.0, 0.0, 3).unwrap();
        assert!(t.data().iter().all(|&v| v == -1.0));
        assert!(oracle_direction_logits(&bg, &cfg, -1.0, 1.0, 0.0, 3).is_err());
    }

    #[test]
    fn noisy_oracle_argmax_recovers_labels() {
        // 10^4 labelled pixels; with hot - cold = 6 and sigma = 0.1 a flip needs a 42-sigma
        // excursion of the difference of two normals, so every label must be recovered.
        let cfg = DirectionConfig::default();
        let labels = DirectionLabelMap {
            h: 100,
            w: 100,
            labels: (0..10_000).map(|i| (i * 7 % 32) as i32).collect(),
        };
        let t = oracle_direction_logits(&labels, &cfg, 3.0, -3.0, 0.1, 99).unwrap();
        let mut correct = 0;
        for y in 0..100 {
            for x in 0..100 {
                let argmax = (0..32)
                    .max_by(|&a, &b| t.get(0, a, y, x).total_cmp(&t.get(0, b, y, x)))
                    .unwrap();
                correct += (argmax as i32 == labels.get(y, x)) as usize;
            }
        }
        assert!(correct as f64 >= 0.999 * 10_000.0);
    }

    #[test]
    fn label_map_tensor_round_trip() {
        let cfg = DirectionConfig::default();
        let labels = DirectionLabelMap {
            h: 2,
            w: 3,
            labels: vec![-1, 0, 31, 5, -1, 2],
        };
        let t = labels.to_tensor();
        assert_eq!(DirectionLabelMap::from_tensor(&t, &cfg).unwrap(), labels);
        let bad = Tensor4::from_vec([1, 1, 1, 1], vec![32.0]).unwrap();
        assert!(DirectionLabelMap::from_tensor(&bad, &cfg).is_err());
    }
}
