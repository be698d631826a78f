//! Tiny fully convolutional backbone producing learnable logits bundles.
//!
//! conv1 5x5 (3 -> 16) + relu, conv2 5x5 (16 -> 32) + relu, 2x2 average pooling, then 1x1
//! semantic and direction heads at stride 2. Both full-resolution relu activations are exposed
//! as hypercolumn sources.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{conv2d, conv2d_backward, ConvParams};
use crate::direction::{encode_direction_labels, DirectionConfig, DirectionLabelMap};
use crate::error::{shape_err, Error, Result};
use crate::heads::{jitter_box, mask_target, roi_loss_backward, BundleGrads, HeadConfig, HeadParams, LogitsBundle};
use crate::loss::softmax_ce_loss;
use crate::optim::{clip_grad_norm, Momentum};
use crate::roi::{crop_and_resize, crop_and_resize_backward_into, RoiBox};
use crate::synth::Scene;
use crate::tensor::{relu, relu_backward, Tensor4};

pub const CONV1_CHANNELS: usize = 16;
pub const CONV2_CHANNELS: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub semantic_head: ConvParams,
    pub direction_head: ConvParams,
    /// Average-pooling factor between conv2 and the logit heads.
    pub logit_stride: usize,
}

impl BackboneParams {
    pub fn init(num_classes: usize, direction_channels: usize, logit_stride: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            logit_stride,
            conv1: ConvParams::init_uniform(CONV1_CHANNELS, 3, 5, &mut rng),
            conv2: ConvParams::init_uniform(CONV2_CHANNELS, CONV1_CHANNELS, 5, &mut rng),
            semantic_head: ConvParams::init_uniform(num_classes, CONV2_CHANNELS, 1, &mut rng),
            direction_head: ConvParams::init_uniform(direction_channels, CONV2_CHANNELS, 1, &mut rng),
        }
    }

    pub fn convs(&self) -> [(&'static str, &ConvParams); 4] {
        [
            ("conv1", &self.conv1),
            ("conv2", &self.conv2),
            ("semantic_head", &self.semantic_head),
            ("direction_head", &self.direction_head),
        ]
    }

    pub fn convs_mut(&mut self) -> [&mut ConvParams; 4] {
        [
            &mut self.conv1,
            &mut self.conv2,
            &mut self.semantic_head,
            &mut self.direction_head,
        ]
    }

    pub fn num_classes(&self) -> usize {
        self.semantic_head.out_channels()
    }

    pub fn direction_channels(&self) -> usize {
        self.direction_head.out_channels()
    }

    pub fn zeros_like(&self) -> Self {
        let z = |p: &ConvParams| {
            let mut q = ConvParams::zeros(p.out_channels(), p.in_channels(), p.kernel_size().0);
            q.padding = p.padding;
            q
        };
        Self {
            logit_stride: self.logit_stride,
            conv1: z(&self.conv1),
            conv2: z(&self.conv2),
            semantic_head: z(&self.semantic_head),
            direction_head: z(&self.direction_head),
        }
    }

    pub fn num_params(&self) -> usize {
        self.convs().iter().map(|(_, p)| p.num_params()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for (_, p) in self.convs() {
            p.push_flat(&mut v);
        }
        v
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        for p in self.convs_mut() {
            at += p.load_flat(&flat[at..]);
        }
    }
}

pub struct BackboneCache {
    input: Tensor4,
    a1: Tensor4,
    a2: Tensor4,
    pooled: Tensor4,
}

fn avg_pool(x: &Tensor4, k: usize) -> Tensor4 {
    if k == 1 {
        return x.clone();
    }
    let norm = 1.0 / (k * k) as f64;
    Tensor4::from_fn([1, x.c(), x.h() / k, x.w() / k], |_, c, y, xx| {
        let p = x.plane(0, c);
        let mut acc = 0.0;
        for r in k * y..k * (y + 1) {
            acc += p[r * x.w() + k * xx..r * x.w() + k * (xx + 1)].iter().sum::<f64>();
        }
        acc * norm
    })
}

fn avg_pool_backward(g: &Tensor4, k: usize) -> Tensor4 {
    if k == 1 {
        return g.clone();
    }
    let norm = 1.0 / (k * k) as f64;
    Tensor4::from_fn([1, g.c(), k * g.h(), k * g.w()], |_, c, y, x| norm * g.get(0, c, y / k, x / k))
}

/// Logits resampled to image resolution at pixel centres, the points the heads sample.
fn full_res_box(bundle: &LogitsBundle) -> Result<RoiBox> {
    let (h, w) = bundle.image_size();
    Ok(RoiBox::new(0.0, 0.0, w as f64, h as f64, 0, 1.0)?.to_feature_coords(bundle.stride))
}

/// Runs the backbone on a `(1, 3, H, W)` image in `[0, 1]`.
pub fn backbone_forward(image: &Tensor4, params: &BackboneParams) -> Result<(LogitsBundle, BackboneCache)> {
    if image.n() != 1 || image.c() != 3 {
        return shape_err(format!("backbone expects a (1, 3, H, W) image, got {:?}", image.shape()));
    }
    let k = params.logit_stride;
    if k == 0 || image.h() % k != 0 || image.w() % k != 0 || image.h() == 0 {
        return shape_err(format!("image {:?} does not divide into logit stride {}", image.shape(), k));
    }
    let input = image.map(|v| v - 0.5);
    let a1 = relu(&conv2d(&input, &params.conv1)?);
    let a2 = relu(&conv2d(&a1, &params.conv2)?);
    let pooled = avg_pool(&a2, k);
    let semantic = conv2d(&pooled, &params.semantic_head)?;
    let direction = conv2d(&pooled, &params.direction_head)?;
    Ok((
        LogitsBundle {
            semantic,
            direction,
            hypercolumns: vec![a1.clone(), a2.clone()],
            stride: k,
        },
        BackboneCache { input, a1, a2, pooled },
    ))
}

pub fn backbone_bundle(image: &Tensor4, params: &BackboneParams) -> Result<LogitsBundle> {
    Ok(backbone_forward(image, params)?.0)
}

/// Parameter gradients given gradients with respect to every bundle tensor.
pub fn backbone_backward(params: &BackboneParams, cache: &BackboneCache, grads: &BundleGrads) -> Result<BackboneParams> {
    if grads.hypercolumns.len() != 2 {
        return shape_err("backbone bundles carry two hypercolumn sources");
    }
    let gs = conv2d_backward(&cache.pooled, &params.semantic_head, &grads.semantic)?;
    let gd = conv2d_backward(&cache.pooled, &params.direction_head, &grads.direction)?;
    let mut g_a2 = avg_pool_backward(&gs.input.add(&gd.input)?, params.logit_stride);
    g_a2.add_assign(&grads.hypercolumns[1])?;
    let g2 = conv2d_backward(&cache.a1, &params.conv2, &relu_backward(&cache.a2, &g_a2)?)?;
    let mut g_a1 = g2.input;
    g_a1.add_assign(&grads.hypercolumns[0])?;
    let g1 = conv2d_backward(&cache.input, &params.conv1, &relu_backward(&cache.a1, &g_a1)?)?;
    let mut out = params.zeros_like();
    for (dst, (w, b)) in out.convs_mut().into_iter().zip([
        (g1.weight, g1.bias),
        (g2.weight, g2.bias),
        (gs.weight, gs.bias),
        (gd.weight, gd.bias),
    ]) {
        dst.weight = w;
        dst.bias = b;
    }
    Ok(out)
}

/// One of the bundle's logit tensors resampled to image resolution.
pub fn full_resolution(bundle: &LogitsBundle, t: &Tensor4) -> Result<Tensor4> {
    if bundle.stride == 1 {
        return Ok(t.clone());
    }
    let (h, w) = bundle.image_size();
    crop_and_resize(t, &full_res_box(bundle)?, h, w)
}

/// Semantic cross-entropy over all pixels plus direction cross-entropy over foreground pixels,
/// on logits bilinearly resampled to image resolution. Gradients are added into `grads`;
/// returns `(semantic, direction)` losses.
pub fn dense_losses(
    bundle: &LogitsBundle,
    class_map: &[usize],
    labels: &DirectionLabelMap,
    grads: &mut BundleGrads,
) -> Result<(f64, f64)> {
    let (h, w) = bundle.image_size();
    let full = full_res_box(bundle)?;
    let upsample = |t: &Tensor4| full_resolution(bundle, t);
    let targets: Vec<i32> = class_map.iter().map(|&k| k as i32).collect();
    let sem = softmax_ce_loss(&upsample(&bundle.semantic)?, &targets, &Tensor4::full([1, 1, h, w], 1.0))?;
    let fg = Tensor4::from_vec([1, 1, h, w], labels.labels.iter().map(|&l| (l >= 0) as u8 as f64).collect())?;
    let dir = softmax_ce_loss(&upsample(&bundle.direction)?, &labels.labels, &fg)?;
    if bundle.stride == 1 {
        grads.semantic.add_assign(&sem.grad)?;
        grads.direction.add_assign(&dir.grad)?;
    } else {
        crop_and_resize_backward_into(&mut grads.semantic, &full, &sem.grad)?;
        crop_and_resize_backward_into(&mut grads.direction, &full, &dir.grad)?;
    }
    Ok((sem.value, dir.value))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneHyper {
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub seed: u64,
    /// Side of the random training crop (0 trains on whole images).
    pub crop: usize,
    /// Gradient-norm clip (0 disables).
    pub clip_norm: f64,
    /// Weight of the mask losses in joint training.
    pub mask_weight: f64,
    /// Box jitter fraction for the mask losses in joint training.
    pub jitter: f64,
    /// Image pixels per logit; see [`BackboneParams::logit_stride`].
    pub logit_stride: usize,
    /// Fraction of the steps after which the learning rate drops tenfold (1 never drops).
    pub decay_at: f64,
}

impl BackboneHyper {
    pub fn lr_at(&self, step: usize) -> f64 {
        if (step as f64) < self.decay_at * self.steps as f64 {
            self.lr
        } else {
            0.1 * self.lr
        }
    }
}

impl Default for BackboneHyper {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            steps: 2000,
            seed: 0,
            crop: 48,
            clip_norm: 5.0,
            mask_weight: 1.0,
            jitter: 0.0,
            logit_stride: 1,
            decay_at: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BackboneTraining {
    pub params: BackboneParams,
    pub loss_curve: Vec<f64>,
}

fn scene_targets(scenes: &[Scene], cfg: &DirectionConfig) -> Result<Vec<(Vec<usize>, DirectionLabelMap)>> {
    scenes
        .iter()
        .map(|s| Ok((s.class_map(), encode_direction_labels(s, cfg)?)))
        .collect()
}

fn random_window(h: usize, w: usize, crop: usize, rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    if crop == 0 || (crop >= h && crop >= w) {
        return (0, 0, h, w);
    }
    let (ch, cw) = (crop.min(h), crop.min(w));
    (rng.random_range(0..=h - ch), rng.random_range(0..=w - cw), ch, cw)
}

fn check_finite(loss: f64, step: usize, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("{} loss is {} at step {}", what, loss, step)))
    }
}

/// Trains the backbone alone on the dense semantic and direction losses, one random crop of
/// one scene per step (scenes visited in order).
pub fn train_backbone(scenes: &[Scene], cfg: &DirectionConfig, hyper: &BackboneHyper) -> Result<BackboneTraining> {
    let num_classes = scenes.first().map(|s| s.num_classes).unwrap_or(2);
    let mut params = BackboneParams::init(num_classes, cfg.num_channels(), hyper.logit_stride, hyper.seed);
    let targets = scene_targets(scenes, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0xbb67_ae85_84ca_a73b);
    let mut opt = Momentum::new(params.num_params(), hyper.momentum);
    let mut loss_curve = Vec::with_capacity(hyper.steps);
    if scenes.is_empty() {
        return Ok(BackboneTraining { params, loss_curve });
    }
    for step in 0..hyper.steps {
        let k = step % scenes.len();
        let scene = &scenes[k];
        let (classes, labels) = &targets[k];
        let (h, w) = (scene.height(), scene.width());
        let (y0, x0, ch, cw) = random_window(h, w, hyper.crop, &mut rng);
        let image = Tensor4::from_fn([1, 3, ch, cw], |_, c, y, x| scene.image.get(0, c, y0 + y, x0 + x));
        let crop_classes: Vec<usize> = (0..ch * cw).map(|p| classes[(y0 + p / cw) * w + x0 + p % cw]).collect();
        let crop_labels = DirectionLabelMap {
            h: ch,
            w: cw,
            labels: (0..ch * cw).map(|p| labels.labels[(y0 + p / cw) * w + x0 + p % cw]).collect(),
        };
        let (bundle, cache) = backbone_forward(&image, &params)?;
        let mut bg = BundleGrads::zeros_like(&bundle);
        let (ls, ld) = dense_losses(&bundle, &crop_classes, &crop_labels, &mut bg)?;
        check_finite(ls + ld, step, "backbone")?;
        loss_curve.push(ls + ld);
        let mut g = backbone_backward(&params, &cache, &bg)?.flat();
        if hyper.clip_norm > 0.0 {
            clip_grad_norm(&mut g, hyper.clip_norm);
        }
        let mut p = params.flat();
        opt.step(&mut p, &g, hyper.lr_at(step))?;
        params.load_flat(&p);
    }
    Ok(BackboneTraining { params, loss_curve })
}

#[derive(Clone, Debug)]
pub struct JointTraining {
    pub backbone: BackboneParams,
    pub heads: HeadParams,
    pub loss_curve: Vec<f64>,
}

/// Trains backbone and mask heads together: dense losses plus the ground-truth-box mask losses,
/// whose gradients flow through the crops and direction pooling into the backbone. One whole
/// scene per step.
pub fn train_joint(
    scenes: &[Scene],
    dir_cfg: &DirectionConfig,
    head_cfg: &HeadConfig,
    hyper: &BackboneHyper,
) -> Result<JointTraining> {
    head_cfg.validate()?;
    let num_classes = scenes.first().map(|s| s.num_classes).unwrap_or(2);
    let mut backbone = BackboneParams::init(num_classes, dir_cfg.num_channels(), hyper.logit_stride, hyper.seed);
    let hc: usize = head_cfg
        .refine_sources
        .iter()
        .map(|&s| match s {
            0 => Ok(CONV1_CHANNELS),
            1 => Ok(CONV2_CHANNELS),
            _ => Err(Error::InvalidArgument(format!("backbone has no hypercolumn source {}", s))),
        })
        .sum::<Result<usize>>()?;
    let mut heads = HeadParams::init(head_cfg, hc, hyper.seed.wrapping_add(1));
    let targets = scene_targets(scenes, dir_cfg)?;
    let nb = backbone.num_params();
    let mut opt = Momentum::new(nb + heads.num_params(), hyper.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x3c6e_f372_fe94_f82b);
    let mut loss_curve = Vec::with_capacity(hyper.steps);
    if scenes.is_empty() {
        return Ok(JointTraining {
            backbone,
            heads,
            loss_curve,
        });
    }
    for step in 0..hyper.steps {
        let k = step % scenes.len();
        let scene = &scenes[k];
        let (classes, labels) = &targets[k];
        let (bundle, cache) = backbone_forward(&scene.image, &backbone)?;
        let mut bg = BundleGrads::zeros_like(&bundle);
        let (ls, ld) = dense_losses(&bundle, classes, labels, &mut bg)?;
        let mut hg = heads.zeros_like();
        let mut lm = 0.0;
        let n = scene.instances.len();
        for inst in &scene.instances {
            let roi = jitter_box(&inst.bbox, hyper.jitter, &mut rng);
            let target = mask_target(&inst.mask, &roi, head_cfg.out);
            let wgt = hyper.mask_weight / n as f64;
            lm += roi_loss_backward(&bundle, &roi, &target, dir_cfg, &heads, head_cfg, wgt, &mut hg, Some(&mut bg))?;
        }
        let loss = ls + ld + lm;
        check_finite(loss, step, "joint")?;
        loss_curve.push(loss);
        let mut g = backbone_backward(&backbone, &cache, &bg)?.flat();
        g.extend(hg.flat());
        if hyper.clip_norm > 0.0 {
            clip_grad_norm(&mut g, hyper.clip_norm);
        }
        let mut p = backbone.flat();
        p.extend(heads.flat());
        opt.step(&mut p, &g, hyper.lr_at(step))?;
        backbone.load_flat(&p[..nb]);
        heads.load_flat(&p[nb..]);
    }
    Ok(JointTraining {
        backbone,
        heads,
        loss_curve,
    })
}

/// Fraction of pixels whose semantic argmax equals the ground-truth class.
pub fn semantic_accuracy(scenes: &[Scene], params: &BackboneParams) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in scenes {
        let b = backbone_bundle(&s.image, params)?;
        let sem = full_resolution(&b, &b.semantic)?;
        let hw = s.height() * s.width();
        let k = sem.c();
        let d = sem.data();
        for (p, &cls) in s.class_map().iter().enumerate() {
            let best = (0..k).max_by(|&a, &c| d[a * hw + p].total_cmp(&d[c * hw + p])).unwrap_or(0);
            hit += (best == cls) as usize;
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}
