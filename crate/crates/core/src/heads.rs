//! Class-agnostic coarse mask head, hypercolumn refinement, head training and decoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{conv2d, conv2d_backward, ConvGrads, ConvParams};
use crate::direction::DirectionConfig;
use crate::error::{arg_err, shape_err, Error, Result};
use crate::loss::bce_loss;
use crate::mask::Mask;
use crate::offset_net::{OffsetCache, OffsetNet};
use crate::optim::{clip_grad_norm, sgd_step};
use crate::roi::{
    crop_and_resize, crop_and_resize_backward_into, deformable_crop_and_resize,
    deformable_crop_and_resize_backward, direction_pool, direction_pool_backward_into, sample_coord, RoiBox,
    SubBoxOffsets,
};
use crate::synth::Scene;
use crate::tensor::{concat_channels, relu, relu_backward, sigmoid, Tensor4};

/// Which cropped features feed the fusing 1x1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    Both,
    SemanticOnly,
    DirectionOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Crop resolution of the mask features.
    pub out: usize,
    pub refine_filters: usize,
    /// Indices into the bundle's hypercolumn sources; empty disables refinement.
    pub refine_sources: Vec<usize>,
    pub features: FeatureSet,
    /// Use the deformable crop for the semantic channel.
    pub deformable: bool,
    pub first_out: usize,
    pub grid: usize,
    pub offset_hidden: usize,
    pub threshold: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            out: 41,
            refine_filters: 64,
            refine_sources: vec![0, 1],
            features: FeatureSet::Both,
            deformable: false,
            first_out: 4,
            grid: 2,
            offset_hidden: 8,
            threshold: 0.5,
        }
    }
}

impl HeadConfig {
    pub fn refines(&self) -> bool {
        !self.refine_sources.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.out == 0 {
            return arg_err("mask crop size must be positive");
        }
        if self.refine_filters < 2 {
            return arg_err("refinement needs at least two filters");
        }
        if self.grid == 0 || self.first_out % self.grid != 0 || self.first_out < self.grid {
            return arg_err("first-stage crop must divide into the sub-box grid");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return arg_err(format!("threshold {} outside (0, 1)", self.threshold));
        }
        Ok(())
    }
}

/// Per-image logits and features consumed by the heads.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsBundle {
    /// `(1, K, H, W)`, channel 0 is background.
    pub semantic: Tensor4,
    /// `(1, D*B, H, W)`.
    pub direction: Tensor4,
    /// Refinement features at image resolution.
    pub hypercolumns: Vec<Tensor4>,
    /// Image pixels per semantic and direction logit.
    pub stride: usize,
}

impl LogitsBundle {
    pub fn image_size(&self) -> (usize, usize) {
        (self.semantic.h() * self.stride, self.semantic.w() * self.stride)
    }

    pub fn num_classes(&self) -> usize {
        self.semantic.c()
    }

    pub fn hypercolumn_channels(&self, sources: &[usize]) -> Result<usize> {
        sources
            .iter()
            .map(|&s| {
                self.hypercolumns
                    .get(s)
                    .map(|t| t.c())
                    .ok_or_else(|| Error::InvalidArgument(format!("no hypercolumn source {}", s)))
            })
            .sum()
    }

    pub fn validate(&self, cfg: &DirectionConfig) -> Result<()> {
        let (h, w) = (self.semantic.h(), self.semantic.w());
        if self.direction.c() != cfg.num_channels() {
            return shape_err(format!(
                "direction logits have {} channels, config needs {}",
                self.direction.c(),
                cfg.num_channels()
            ));
        }
        if self.stride == 0 {
            return arg_err("bundle stride must be positive");
        }
        let (ih, iw) = self.image_size();
        let dims = std::iter::once((&self.direction, h, w)).chain(self.hypercolumns.iter().map(|t| (t, ih, iw)));
        for (t, th, tw) in dims {
            if t.n() != 1 || t.h() != th || t.w() != tw {
                return shape_err(format!("bundle tensor {:?} does not match {}x{}", t.shape(), th, tw));
            }
        }
        Ok(())
    }
}

/// Gradients with respect to every tensor of a [`LogitsBundle`].
#[derive(Clone, Debug)]
pub struct BundleGrads {
    pub semantic: Tensor4,
    pub direction: Tensor4,
    pub hypercolumns: Vec<Tensor4>,
}

impl BundleGrads {
    pub fn zeros_like(b: &LogitsBundle) -> Self {
        Self {
            semantic: Tensor4::zeros(b.semantic.shape()),
            direction: Tensor4::zeros(b.direction.shape()),
            hypercolumns: b.hypercolumns.iter().map(|t| Tensor4::zeros(t.shape())).collect(),
        }
    }
}

/// Trainable head parameters. Also used as the container for their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// 1x1 conv over (semantic crop, pooled direction) to one mask logit.
    pub fuse: ConvParams,
    /// Three 5x5 convs; relu between, linear output.
    pub refine: Vec<ConvParams>,
    pub offset: OffsetNet,
}

impl HeadParams {
    /// Fusing weights start at (0.5, 1) with zero bias. The refinement net starts as an exact
    /// pass-through of the coarse logits (channels 0/1 carry +/- coarse through the relus and
    /// the output layer subtracts them); its remaining filters are random and its remaining
    /// output weights zero.
    pub fn init(cfg: &HeadConfig, hypercolumn_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fuse = ConvParams {
            weight: Tensor4::from_vec([1, 2, 1, 1], vec![0.5, 1.0]).expect("static shape"),
            bias: vec![0.0],
            stride: 1,
            padding: 0,
        };
        let f = cfg.refine_filters;
        let in_c = 1 + hypercolumn_channels;
        let mut r0 = ConvParams::init_uniform(f, in_c, 5, &mut rng);
        let mut r1 = ConvParams::init_uniform(f, f, 5, &mut rng);
        let mut r2 = ConvParams::zeros(1, f, 5);
        for (row, sign) in [(0usize, 1.0), (1, -1.0)] {
            for c in 0..in_c {
                for k in 0..25 {
                    r0.weight.set(row, c, k / 5, k % 5, 0.0);
                }
            }
            r0.weight.set(row, 0, 2, 2, sign);
            for c in 0..f {
                for k in 0..25 {
                    r1.weight.set(row, c, k / 5, k % 5, 0.0);
                }
            }
            r1.weight.set(row, row, 2, 2, 1.0);
            r2.weight.set(0, row, 2, 2, sign);
        }
        let offset = OffsetNet::init(1, cfg.offset_hidden, cfg.grid, &mut rng);
        Self {
            fuse,
            refine: vec![r0, r1, r2],
            offset,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |p: &ConvParams| ConvParams {
            weight: Tensor4::zeros(p.weight.shape()),
            bias: vec![0.0; p.bias.len()],
            stride: p.stride,
            padding: p.padding,
        };
        Self {
            fuse: z(&self.fuse),
            refine: self.refine.iter().map(z).collect(),
            offset: self.offset.zeros_like(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.fuse.num_params()
            + self.refine.iter().map(|p| p.num_params()).sum::<usize>()
            + self.offset.num_params()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        self.fuse.push_flat(&mut v);
        for p in &self.refine {
            p.push_flat(&mut v);
        }
        self.offset.push_flat(&mut v);
        v
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        let mut at = self.fuse.load_flat(flat);
        for p in &mut self.refine {
            at += p.load_flat(&flat[at..]);
        }
        self.offset.load_flat(&flat[at..]);
    }
}

fn add_conv_grads(dst: &mut ConvParams, g: &ConvGrads) {
    for (a, b) in dst.weight.data_mut().iter_mut().zip(g.weight.data()) {
        *a += b;
    }
    for (a, b) in dst.bias.iter_mut().zip(&g.bias) {
        *a += b;
    }
}

fn add_conv_params(dst: &mut ConvParams, g: &ConvParams) {
    for (a, b) in dst.weight.data_mut().iter_mut().zip(g.weight.data()) {
        *a += b;
    }
    for (a, b) in dst.bias.iter_mut().zip(&g.bias) {
        *a += b;
    }
}

struct Deform {
    stage1: Tensor4,
    offsets: SubBoxOffsets,
    cache: OffsetCache,
}

struct CoarseCache {
    fbox: RoiBox,
    sem_channel: Tensor4,
    deform: Option<Deform>,
    fused_input: Tensor4,
}

struct RefineCache {
    x: Tensor4,
    h1: Tensor4,
    h2: Tensor4,
}

fn check_label(bundle: &LogitsBundle, roi: &RoiBox) -> Result<()> {
    if roi.label == 0 || roi.label >= bundle.num_classes() {
        return arg_err(format!(
            "box label {} is not a foreground class in [1, {})",
            roi.label,
            bundle.num_classes()
        ));
    }
    Ok(())
}

fn coarse_forward(
    bundle: &LogitsBundle,
    roi: &RoiBox,
    dir_cfg: &DirectionConfig,
    params: &HeadParams,
    cfg: &HeadConfig,
) -> Result<(Tensor4, CoarseCache)> {
    check_label(bundle, roi)?;
    let fbox = roi.to_feature_coords(bundle.stride);
    let out = cfg.out;
    let sem_channel = bundle.semantic.channel(roi.label)?;
    let (mut sem_crop, deform) = if cfg.deformable {
        let stage1 = crop_and_resize(&sem_channel, &fbox, cfg.first_out, cfg.first_out)?;
        let (offsets, cache) = params.offset.forward(&stage1)?;
        let crop = deformable_crop_and_resize(&sem_channel, &fbox, &offsets, out, cfg.first_out)?;
        (crop, Some(Deform { stage1, offsets, cache }))
    } else {
        (crop_and_resize(&sem_channel, &fbox, out, out)?, None)
    };
    let mut dir_pool = direction_pool(&bundle.direction, &fbox, dir_cfg, out)?;
    match cfg.features {
        FeatureSet::Both => {}
        FeatureSet::SemanticOnly => dir_pool = Tensor4::zeros(dir_pool.shape()),
        FeatureSet::DirectionOnly => sem_crop = Tensor4::zeros(sem_crop.shape()),
    }
    let fused_input = concat_channels(&[&sem_crop, &dir_pool])?;
    let logits = conv2d(&fused_input, &params.fuse)?;
    Ok((
        logits,
        CoarseCache {
            fbox,
            sem_channel,
            deform,
            fused_input,
        },
    ))
}

#[allow(clippy::too_many_arguments)]
fn coarse_backward(
    roi: &RoiBox,
    dir_cfg: &DirectionConfig,
    params: &HeadParams,
    cfg: &HeadConfig,
    cache: &CoarseCache,
    grad_logits: &Tensor4,
    grads: &mut HeadParams,
    bundle_grads: Option<&mut BundleGrads>,
) -> Result<()> {
    let cg = conv2d_backward(&cache.fused_input, &params.fuse, grad_logits)?;
    add_conv_grads(&mut grads.fuse, &cg);
    let g_sem = cg.input.channel(0)?;
    let g_dir = cg.input.channel(1)?;
    let use_sem = cfg.features != FeatureSet::DirectionOnly;
    let use_dir = cfg.features != FeatureSet::SemanticOnly;

    let mut sem_channel_grad = Tensor4::zeros(cache.sem_channel.shape());
    if use_sem {
        match &cache.deform {
            Some(d) => {
                let dg = deformable_crop_and_resize_backward(
                    &cache.sem_channel,
                    &cache.fbox,
                    &d.offsets,
                    cfg.out,
                    cfg.first_out,
                    &g_sem,
                )?;
                sem_channel_grad.add_assign(&dg.features)?;
                let og = params.offset.backward(&d.cache, &dg.offsets)?;
                add_conv_params(&mut grads.offset.conv, &og.net.conv);
                add_conv_params(&mut grads.offset.fc, &og.net.fc);
                debug_assert_eq!(og.input.shape(), d.stage1.shape());
                crop_and_resize_backward_into(&mut sem_channel_grad, &cache.fbox, &og.input)?;
            }
            None => crop_and_resize_backward_into(&mut sem_channel_grad, &cache.fbox, &g_sem)?,
        }
    }
    if let Some(bg) = bundle_grads {
        if use_sem {
            let plane = bg.semantic.plane_mut(0, roi.label);
            for (a, b) in plane.iter_mut().zip(sem_channel_grad.data()) {
                *a += b;
            }
        }
        if use_dir {
            direction_pool_backward_into(&mut bg.direction, &cache.fbox, dir_cfg, &g_dir)?;
        }
    }
    Ok(())
}

fn refine_forward(
    coarse: &Tensor4,
    bundle: &LogitsBundle,
    roi: &RoiBox,
    params: &HeadParams,
    cfg: &HeadConfig,
) -> Result<(Tensor4, RefineCache)> {
    if params.refine.len() != 3 {
        return shape_err("refinement net needs three convolutions");
    }
    let mut parts = vec![coarse.clone()];
    for &s in &cfg.refine_sources {
        let src = bundle
            .hypercolumns
            .get(s)
            .ok_or_else(|| Error::InvalidArgument(format!("no hypercolumn source {}", s)))?;
        parts.push(crop_and_resize(src, roi, cfg.out, cfg.out)?);
    }
    let refs: Vec<&Tensor4> = parts.iter().collect();
    let x = concat_channels(&refs)?;
    let h1 = relu(&conv2d(&x, &params.refine[0])?);
    let h2 = relu(&conv2d(&h1, &params.refine[1])?);
    let y = conv2d(&h2, &params.refine[2])?;
    Ok((y, RefineCache { x, h1, h2 }))
}

/// Returns the gradient with respect to the coarse logits.
fn refine_backward(
    roi: &RoiBox,
    params: &HeadParams,
    cfg: &HeadConfig,
    cache: &RefineCache,
    grad_y: &Tensor4,
    grads: &mut HeadParams,
    bundle_grads: Option<&mut BundleGrads>,
) -> Result<Tensor4> {
    let g3 = conv2d_backward(&cache.h2, &params.refine[2], grad_y)?;
    add_conv_grads(&mut grads.refine[2], &g3);
    let gh2 = relu_backward(&cache.h2, &g3.input)?;
    let g2 = conv2d_backward(&cache.h1, &params.refine[1], &gh2)?;
    add_conv_grads(&mut grads.refine[1], &g2);
    let gh1 = relu_backward(&cache.h1, &g2.input)?;
    let g1 = conv2d_backward(&cache.x, &params.refine[0], &gh1)?;
    add_conv_grads(&mut grads.refine[0], &g1);
    if let Some(bg) = bundle_grads {
        let mut at = 1;
        for &s in &cfg.refine_sources {
            let c = bg.hypercolumns[s].c();
            let slice = g1.input.slice_channels(at, c)?;
            crop_and_resize_backward_into(&mut bg.hypercolumns[s], roi, &slice)?;
            at += c;
        }
    }
    g1.input.channel(0)
}

/// Coarse mask logits `(1, 1, out, out)` for one box.
pub fn coarse_mask(
    bundle: &LogitsBundle,
    roi: &RoiBox,
    dir_cfg: &DirectionConfig,
    params: &HeadParams,
    cfg: &HeadConfig,
) -> Result<Tensor4> {
    Ok(coarse_forward(bundle, roi, dir_cfg, params, cfg)?.0)
}

/// Refined mask logits from coarse logits concatenated with cropped hypercolumn features.
pub fn refine_mask(
    coarse: &Tensor4,
    bundle: &LogitsBundle,
    roi: &RoiBox,
    params: &HeadParams,
    cfg: &HeadConfig,
) -> Result<Tensor4> {
    if !cfg.refines() {
        return arg_err("refinement needs at least one hypercolumn source");
    }
    Ok(refine_forward(coarse, bundle, roi, params, cfg)?.0)
}

/// Coarse logits and, when refinement is enabled, refined logits for one box.
pub fn mask_logits(
    bundle: &LogitsBundle,
    roi: &RoiBox,
    dir_cfg: &DirectionConfig,
    params: &HeadParams,
    cfg: &HeadConfig,
) -> Result<(Tensor4, Option<Tensor4>)> {
    let (coarse, _) = coarse_forward(bundle, roi, dir_cfg, params, cfg)?;
    let refined = if cfg.refines() {
        Some(refine_forward(&coarse, bundle, roi, params, cfg)?.0)
    } else {
        None
    };
    Ok((coarse, refined))
}

/// Offsets the deformable crop applies for `roi` (zero when deformation is off).
pub fn sub_box_offsets(bundle: &LogitsBundle, roi: &RoiBox, params: &HeadParams, cfg: &HeadConfig) -> Result<SubBoxOffsets> {
    if !cfg.deformable {
        return Ok(SubBoxOffsets::zeros(cfg.grid));
    }
    check_label(bundle, roi)?;
    let fbox = roi.to_feature_coords(bundle.stride);
    let stage1 = crop_and_resize(&bundle.semantic.channel(roi.label)?, &fbox, cfg.first_out, cfg.first_out)?;
    Ok(params.offset.forward(&stage1)?.0)
}

/// Ground-truth mask sampled (nearest pixel) at the crop's cell-centre sample points.
pub fn mask_target(mask: &Mask, roi: &RoiBox, out: usize) -> Tensor4 {
    Tensor4::from_fn([1, 1, out, out], |_, _, i, j| {
        let x = sample_coord(roi.x0, roi.x1, j, out).floor();
        let y = sample_coord(roi.y0, roi.y1, i, out).floor();
        mask.get_signed(y as isize, x as isize) as u8 as f64
    })
}

/// Mask losses for one box (coarse, plus refined when enabled). Gradients scaled by `weight`
/// are accumulated into `grads` and, if given, `bundle_grads`. Returns the weighted loss.
#[allow(clippy::too_many_arguments)]
pub fn roi_loss_backward(
    bundle: &LogitsBundle,
    roi: &RoiBox,
    target: &Tensor4,
    dir_cfg: &DirectionConfig,
    params: &HeadParams,
    cfg: &HeadConfig,
    weight: f64,
    grads: &mut HeadParams,
    mut bundle_grads: Option<&mut BundleGrads>,
) -> Result<f64> {
    let (coarse, ccache) = coarse_forward(bundle, roi, dir_cfg, params, cfg)?;
    let full = Tensor4::full(target.shape(), 1.0);
    let lc = bce_loss(&coarse, target, &full)?;
    let mut loss = lc.value;
    let mut g_coarse = lc.grad.scale(weight);
    if cfg.refines() {
        let (refined, rcache) = refine_forward(&coarse, bundle, roi, params, cfg)?;
        let lr = bce_loss(&refined, target, &full)?;
        loss += lr.value;
        let g_back = refine_backward(
            roi,
            params,
            cfg,
            &rcache,
            &lr.grad.scale(weight),
            grads,
            bundle_grads.as_deref_mut(),
        )?;
        g_coarse.add_assign(&g_back)?;
    }
    coarse_backward(roi, dir_cfg, params, cfg, &ccache, &g_coarse, grads, bundle_grads)?;
    Ok(loss * weight)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    /// Uniform box jitter as a fraction of box size (0 disables).
    pub jitter: f64,
    /// Gradient-norm clip (0 disables).
    pub clip_norm: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 0.05,
            steps: 500,
            seed: 0,
            jitter: 0.0,
            clip_norm: 10.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadTraining {
    pub params: HeadParams,
    pub loss_curve: Vec<f64>,
}

pub(crate) fn jitter_box(roi: &RoiBox, frac: f64, rng: &mut ChaCha8Rng) -> RoiBox {
    if frac <= 0.0 {
        return *roi;
    }
    let (w, h) = (roi.width(), roi.height());
    let mut j = |s: f64| rng.random_range(-frac..=frac) * s;
    let b = RoiBox {
        x0: roi.x0 + j(w),
        y0: roi.y0 + j(h),
        x1: roi.x1 + j(w),
        y1: roi.y1 + j(h),
        ..*roi
    };
    if b.validate().is_ok() {
        b
    } else {
        *roi
    }
}

fn check_dataset(scenes: &[Scene], bundles: &[LogitsBundle]) -> Result<()> {
    if scenes.len() != bundles.len() {
        return shape_err(format!("{} scenes but {} bundles", scenes.len(), bundles.len()));
    }
    Ok(())
}

/// Trains the head parameters on fixed bundles with ground-truth boxes. One step visits one
/// scene (in order, cycling) and averages the mask losses over its instances.
pub fn train_heads(
    scenes: &[Scene],
    bundles: &[LogitsBundle],
    dir_cfg: &DirectionConfig,
    cfg: &HeadConfig,
    hyper: &TrainHyper,
) -> Result<HeadTraining> {
    check_dataset(scenes, bundles)?;
    cfg.validate()?;
    let hc = match bundles.first() {
        Some(b) => b.hypercolumn_channels(&cfg.refine_sources)?,
        None => 0,
    };
    let mut params = HeadParams::init(cfg, hc, hyper.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x6a09_e667_f3bc_c908);
    let mut loss_curve = Vec::with_capacity(hyper.steps);
    if scenes.is_empty() {
        return Ok(HeadTraining { params, loss_curve });
    }
    for step in 0..hyper.steps {
        let k = step % scenes.len();
        let (scene, bundle) = (&scenes[k], &bundles[k]);
        let mut grads = params.zeros_like();
        let mut loss = 0.0;
        let n = scene.instances.len();
        for inst in &scene.instances {
            let roi = jitter_box(&inst.bbox, hyper.jitter, &mut rng);
            let target = mask_target(&inst.mask, &roi, cfg.out);
            loss += roi_loss_backward(bundle, &roi, &target, dir_cfg, &params, cfg, 1.0 / n as f64, &mut grads, None)?;
        }
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("head loss is {} at step {}", loss, step)));
        }
        loss_curve.push(loss);
        if n == 0 {
            continue;
        }
        let mut g = grads.flat();
        if hyper.clip_norm > 0.0 {
            clip_grad_norm(&mut g, hyper.clip_norm);
        }
        let mut p = params.flat();
        sgd_step(&mut p, &g, hyper.lr)?;
        params.load_flat(&p);
    }
    Ok(HeadTraining { params, loss_curve })
}

/// Mean per-box mask loss over every ground-truth instance.
pub fn dataset_loss(
    scenes: &[Scene],
    bundles: &[LogitsBundle],
    dir_cfg: &DirectionConfig,
    params: &HeadParams,
    cfg: &HeadConfig,
) -> Result<f64> {
    check_dataset(scenes, bundles)?;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut scratch = params.zeros_like();
    for (scene, bundle) in scenes.iter().zip(bundles) {
        for inst in &scene.instances {
            let target = mask_target(&inst.mask, &inst.bbox, cfg.out);
            total += roi_loss_backward(bundle, &inst.bbox, &target, dir_cfg, params, cfg, 1.0, &mut scratch, None)?;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// A decoded instance: the box, its pasted full-image masks, and the cell probabilities.
#[derive(Clone, Debug)]
pub struct Detection {
    pub roi: RoiBox,
    /// Final mask (refined when refinement is enabled).
    pub mask: Mask,
    pub coarse_mask: Mask,
    pub score: f64,
    pub probs: Tensor4,
    pub coarse_probs: Tensor4,
}

/// Pastes `out x out` cell probabilities into an `h x w` image: each pixel whose centre lies in
/// the box takes the cell containing it.
pub fn paste_mask(probs: &Tensor4, roi: &RoiBox, h: usize, w: usize, threshold: f64) -> Mask {
    let (oh, ow) = (probs.h(), probs.w());
    let plane = probs.plane(0, 0);
    let mut m = Mask::new(h, w);
    let r0 = roi.y0.floor().max(0.0) as usize;
    let r1 = (roi.y1.ceil().max(0.0) as usize).min(h);
    let c0 = roi.x0.floor().max(0.0) as usize;
    let c1 = (roi.x1.ceil().max(0.0) as usize).min(w);
    for y in r0..r1 {
        let cy = y as f64 + 0.5;
        if cy < roi.y0 || cy >= roi.y1 {
            continue;
        }
        let i = (((cy - roi.y0) / roi.height() * oh as f64) as usize).min(oh - 1);
        for x in c0..c1 {
            let cx = x as f64 + 0.5;
            if cx < roi.x0 || cx >= roi.x1 {
                continue;
            }
            let j = (((cx - roi.x0) / roi.width() * ow as f64) as usize).min(ow - 1);
            if plane[i * ow + j] > threshold {
                m.set(y, x, true);
            }
        }
    }
    m
}

fn mask_score(probs: &Tensor4, threshold: f64) -> f64 {
    let fg: Vec<f64> = probs.data().iter().copied().filter(|&p| p > threshold).collect();
    if fg.is_empty() {
        0.0
    } else {
        fg.iter().sum::<f64>() / fg.len() as f64
    }
}

/// Runs coarse (and refined) heads on every box, thresholds the sigmoid, and pastes the masks
/// back into image coordinates. Score is the box score times the mean foreground probability.
pub fn decode_instances(
    bundle: &LogitsBundle,
    boxes: &[RoiBox],
    dir_cfg: &DirectionConfig,
    params: &HeadParams,
    cfg: &HeadConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let (h, w) = bundle.image_size();
    let mut out = Vec::with_capacity(boxes.len());
    for roi in boxes {
        roi.validate()?;
        let (coarse, refined) = mask_logits(bundle, roi, dir_cfg, params, cfg)?;
        let coarse_probs = sigmoid(&coarse);
        let probs = refined.as_ref().map(sigmoid).unwrap_or_else(|| coarse_probs.clone());
        out.push(Detection {
            roi: *roi,
            mask: paste_mask(&probs, roi, h, w, cfg.threshold),
            coarse_mask: paste_mask(&coarse_probs, roi, h, w, cfg.threshold),
            score: roi.score * mask_score(&probs, cfg.threshold),
            probs,
            coarse_probs,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::mask_iou;
    use crate::gradcheck::gradcheck_subset;
    use crate::synth::{generate_scene, oracle_bundle, rasterize_disk, Instance, SynthConfig};
    use rand_distr::{Distribution, Normal};

    fn small_cfg() -> HeadConfig {
        HeadConfig {
            out: 12,
            refine_filters: 4,
            ..HeadConfig::default()
        }
    }

    fn random_bundle(k: usize, dir: &DirectionConfig, h: usize, w: usize, seed: u64) -> LogitsBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut t = |c: usize| Tensor4::from_fn([1, c, h, w], |_, _, _, _| n.sample(&mut rng));
        LogitsBundle {
            semantic: t(k),
            direction: t(dir.num_channels()),
            hypercolumns: vec![t(1), t(2)],
            stride: 1,
        }
    }

    #[test]
    fn init_uses_half_and_one_fuse_weights() {
        let p = HeadParams::init(&HeadConfig::default(), 3, 7);
        assert_eq!(p.fuse.weight.data(), &[0.5, 1.0]);
        assert_eq!(p.fuse.bias, vec![0.0]);
        assert_eq!(p.refine.len(), 3);
        assert_eq!(p.refine[0].weight.shape(), [64, 4, 5, 5]);
        assert_eq!(p.refine[2].weight.shape(), [1, 64, 5, 5]);
        let mut q = p.clone();
        q.load_flat(&p.flat());
        assert_eq!(p, q);
    }

    #[test]
    fn coarse_logits_compose_constant_features() {
        let dir = DirectionConfig::default();
        let (s, d) = (1.25, -0.75);
        let mut b = random_bundle(3, &dir, 16, 16, 0);
        b.semantic = Tensor4::full([1, 3, 16, 16], s);
        b.direction = Tensor4::full([1, dir.num_channels(), 16, 16], d);
        let cfg = small_cfg();
        let p = HeadParams::init(&cfg, 3, 0);
        let roi = RoiBox::new(3.0, 4.0, 11.5, 12.0, 2, 1.0).unwrap();
        let c = coarse_mask(&b, &roi, &dir, &p, &cfg).unwrap();
        assert!(c.data().iter().all(|&v| (v - (0.5 * s + d)).abs() < 1e-12));

        b.semantic = Tensor4::zeros(b.semantic.shape());
        b.direction = Tensor4::zeros(b.direction.shape());
        let c = coarse_mask(&b, &roi, &dir, &p, &cfg).unwrap();
        assert!(sigmoid(&c).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn background_label_is_rejected() {
        let dir = DirectionConfig::default();
        let b = random_bundle(3, &dir, 8, 8, 0);
        let cfg = small_cfg();
        let p = HeadParams::init(&cfg, 3, 0);
        let roi = RoiBox::new(1.0, 1.0, 5.0, 5.0, 0, 1.0).unwrap();
        assert!(coarse_mask(&b, &roi, &dir, &p, &cfg).is_err());
    }

    #[test]
    fn refinement_starts_as_identity() {
        let dir = DirectionConfig::default();
        let b = random_bundle(3, &dir, 16, 16, 1);
        let cfg = small_cfg();
        let p = HeadParams::init(&cfg, 3, 5);
        let roi = RoiBox::new(2.0, 1.5, 13.0, 14.0, 1, 1.0).unwrap();
        let c = coarse_mask(&b, &roi, &dir, &p, &cfg).unwrap();
        let r = refine_mask(&c, &b, &roi, &p, &cfg).unwrap();
        assert_eq!(c, r);
    }

    #[test]
    fn zero_refinement_gives_composed_biases() {
        let dir = DirectionConfig::default();
        let mut b = random_bundle(3, &dir, 16, 16, 1);
        for t in &mut b.hypercolumns {
            *t = Tensor4::zeros(t.shape());
        }
        let cfg = small_cfg();
        let mut p = HeadParams::init(&cfg, 3, 5);
        for (k, conv) in p.refine.iter_mut().enumerate() {
            conv.weight = Tensor4::zeros(conv.weight.shape());
            conv.bias = vec![0.3 * (k as f64 + 1.0); conv.bias.len()];
        }
        let roi = RoiBox::new(2.0, 1.5, 13.0, 14.0, 1, 1.0).unwrap();
        let r = refine_mask(&Tensor4::zeros([1, 1, 12, 12]), &b, &roi, &p, &cfg).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.3 * 3.0));
    }

    #[test]
    fn noiseless_oracle_recovers_a_single_instance() {
        let dir = DirectionConfig::default();
        let mask = rasterize_disk(48, 48, 22.3, 25.1, 11.0);
        let scene = Scene::from_instances(vec![Instance::new(1, mask.clone())], 4, 0, 0);
        let b = oracle_bundle(&scene, &dir, 0.0, 0).unwrap();
        let cfg = HeadConfig::default();
        let p = HeadParams::init(&cfg, 2, 0);
        let roi = scene.instances[0].bbox;
        let c = coarse_mask(&b, &roi, &dir, &p, &cfg).unwrap();
        let target = mask_target(&mask, &roi, cfg.out);
        let pred = Mask::from_fn(cfg.out, cfg.out, |i, j| c.get(0, 0, i, j) > 0.0);
        let tgt = Mask::from_fn(cfg.out, cfg.out, |i, j| target.get(0, 0, i, j) > 0.5);
        assert!(mask_iou(&pred, &tgt).unwrap() >= 0.95);
        let det = decode_instances(&b, &[roi], &dir, &p, &cfg).unwrap();
        assert!(mask_iou(&det[0].mask, &mask).unwrap() >= 0.90);
        assert!(det[0].score > 0.9);
    }

    #[test]
    fn saturated_threshold_gives_empty_masks() {
        let dir = DirectionConfig::default();
        let b = random_bundle(3, &dir, 16, 16, 2);
        let cfg = HeadConfig {
            threshold: 1.0 - 1e-9,
            ..small_cfg()
        };
        let p = HeadParams::init(&cfg, 3, 0);
        let roi = RoiBox::new(2.0, 2.0, 12.0, 12.0, 1, 1.0).unwrap();
        let det = decode_instances(&b, &[roi], &dir, &p, &cfg).unwrap();
        assert!(det[0].mask.is_empty());
        assert_eq!(det[0].score, 0.0);
        assert!(decode_instances(&b, &[], &dir, &p, &cfg).unwrap().is_empty());
    }

    #[test]
    fn decoded_masks_stay_inside_their_boxes() {
        let dir = DirectionConfig::default();
        let b = random_bundle(3, &dir, 20, 20, 3);
        let cfg = small_cfg();
        let p = HeadParams::init(&cfg, 3, 0);
        let boxes = [
            RoiBox::new(-3.0, 2.0, 9.5, 11.0, 1, 0.5).unwrap(),
            RoiBox::new(10.2, 12.7, 25.0, 19.9, 2, 0.9).unwrap(),
        ];
        let det = decode_instances(&b, &boxes, &dir, &p, &cfg).unwrap();
        for d in &det {
            for (y, x) in d.mask.foreground() {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                assert!(cx >= d.roi.x0 && cx < d.roi.x1 && cy >= d.roi.y0 && cy < d.roi.y1);
            }
        }
        let again = decode_instances(&b, &boxes, &dir, &p, &cfg).unwrap();
        assert_eq!(det[1].mask, again[1].mask);
        assert_eq!(det[1].score, again[1].score);
    }

    #[test]
    fn channel_permutation_with_relabelled_boxes() {
        let dir = DirectionConfig::default();
        let b = random_bundle(4, &dir, 16, 16, 4);
        let perm = [0usize, 3, 1, 2];
        let mut pb = b.clone();
        for (old, &new) in perm.iter().enumerate() {
            pb.semantic.plane_mut(0, new).copy_from_slice(b.semantic.plane(0, old));
        }
        let cfg = small_cfg();
        let p = HeadParams::init(&cfg, 3, 0);
        for label in 1..4 {
            let roi = RoiBox::new(1.5, 2.0, 14.0, 12.5, label, 1.0).unwrap();
            let moved = RoiBox { label: perm[label], ..roi };
            assert_eq!(
                coarse_mask(&b, &roi, &dir, &p, &cfg).unwrap(),
                coarse_mask(&pb, &moved, &dir, &p, &cfg).unwrap()
            );
        }
    }

    fn check_loss_gradients(cfg: &HeadConfig, seed: u64) {
        let dir = DirectionConfig::new(4, 2);
        let b = random_bundle(3, &dir, 14, 14, seed);
        let hc = b.hypercolumn_channels(&cfg.refine_sources).unwrap();
        let mut p = HeadParams::init(cfg, hc, seed);
        // move away from the identity warm start so every path carries gradient
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let mut flat = p.flat();
        for v in &mut flat {
            *v += rng.random_range(-0.2..0.2);
        }
        p.load_flat(&flat);
        let roi = RoiBox::new(2.3, 1.7, 11.6, 12.2, 2, 1.0).unwrap();
        let mask = Mask::from_fn(14, 14, |y, x| (y + x) % 3 != 0 && y > 3);
        let target = mask_target(&mask, &roi, cfg.out);

        let n = flat.len();
        let indices: Vec<usize> = (0..n).step_by((n / 60).max(1)).collect();
        let report = gradcheck_subset(
            |theta| {
                let mut q = p.clone();
                q.load_flat(theta);
                let mut g = q.zeros_like();
                let l = roi_loss_backward(&b, &roi, &target, &dir, &q, cfg, 1.0, &mut g, None).unwrap();
                (l, g.flat())
            },
            &flat,
            1e-5,
            &indices,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "params: {}", report.max_rel_error);

        let pack = |bb: &LogitsBundle| {
            let mut v = bb.semantic.data().to_vec();
            v.extend_from_slice(bb.direction.data());
            for t in &bb.hypercolumns {
                v.extend_from_slice(t.data());
            }
            v
        };
        let unpack = |v: &[f64]| {
            let mut bb = b.clone();
            let mut at = 0;
            for t in std::iter::once(&mut bb.semantic)
                .chain(std::iter::once(&mut bb.direction))
                .chain(bb.hypercolumns.iter_mut())
            {
                let len = t.len();
                t.data_mut().copy_from_slice(&v[at..at + len]);
                at += len;
            }
            bb
        };
        let theta = pack(&b);
        let indices: Vec<usize> = (0..theta.len()).step_by(7).collect();
        let report = gradcheck_subset(
            |v| {
                let bb = unpack(v);
                let mut g = p.zeros_like();
                let mut bg = BundleGrads::zeros_like(&bb);
                let l = roi_loss_backward(&bb, &roi, &target, &dir, &p, cfg, 1.0, &mut g, Some(&mut bg)).unwrap();
                let mut flat = bg.semantic.data().to_vec();
                flat.extend_from_slice(bg.direction.data());
                for t in &bg.hypercolumns {
                    flat.extend_from_slice(t.data());
                }
                (l, flat)
            },
            &theta,
            1e-5,
            &indices,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "bundle: {}", report.max_rel_error);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        check_loss_gradients(&small_cfg(), 11);
    }

    #[test]
    fn deformable_loss_gradients_match_finite_differences() {
        let cfg = HeadConfig {
            deformable: true,
            out: 10,
            ..small_cfg()
        };
        check_loss_gradients(&cfg, 12);
    }

    #[test]
    fn ablated_features_get_no_gradient() {
        let dir = DirectionConfig::default();
        let b = random_bundle(3, &dir, 12, 12, 9);
        let roi = RoiBox::new(1.0, 1.0, 10.0, 11.0, 1, 1.0).unwrap();
        let target = Tensor4::full([1, 1, 12, 12], 1.0);
        for (features, sem_zero, dir_zero) in [(FeatureSet::SemanticOnly, false, true), (FeatureSet::DirectionOnly, true, false)] {
            let cfg = HeadConfig {
                features,
                ..small_cfg()
            };
            let p = HeadParams::init(&cfg, 3, 0);
            let mut g = p.zeros_like();
            let mut bg = BundleGrads::zeros_like(&b);
            roi_loss_backward(&b, &roi, &target, &dir, &p, &cfg, 1.0, &mut g, Some(&mut bg)).unwrap();
            assert_eq!(bg.semantic.data().iter().all(|&v| v == 0.0), sem_zero);
            assert_eq!(bg.direction.data().iter().all(|&v| v == 0.0), dir_zero);
        }
    }

    #[test]
    fn head_training_is_deterministic_and_reduces_loss() {
        let synth = SynthConfig {
            height: 40,
            width: 40,
            min_radius: 5.0,
            max_radius: 9.0,
            max_shapes: 3,
            ..SynthConfig::default()
        };
        let dir = DirectionConfig::default();
        let scenes: Vec<Scene> = (0..4).map(|i| generate_scene(&synth, i).unwrap()).collect();
        let bundles: Vec<LogitsBundle> = scenes.iter().map(|s| oracle_bundle(s, &dir, 1.0, 3).unwrap()).collect();
        let cfg = HeadConfig {
            out: 15,
            refine_filters: 6,
            ..HeadConfig::default()
        };
        let zero = TrainHyper { steps: 0, ..TrainHyper::default() };
        let t0 = train_heads(&scenes, &bundles, &dir, &cfg, &zero).unwrap();
        assert_eq!(t0.params, HeadParams::init(&cfg, 2, 0));
        assert_eq!(t0.params.fuse.weight.data(), &[0.5, 1.0]);

        let hyper = TrainHyper { steps: 60, ..TrainHyper::default() };
        let a = train_heads(&scenes, &bundles, &dir, &cfg, &hyper).unwrap();
        let b = train_heads(&scenes, &bundles, &dir, &cfg, &hyper).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss_curve, b.loss_curve);
        let before = dataset_loss(&scenes, &bundles, &dir, &t0.params, &cfg).unwrap();
        let after = dataset_loss(&scenes, &bundles, &dir, &a.params, &cfg).unwrap();
        assert!(after < before, "{} -> {}", before, after);
    }

    #[test]
    fn nan_logits_abort_training() {
        let dir = DirectionConfig::default();
        let scene = Scene::from_instances(vec![Instance::new(1, rasterize_disk(16, 16, 8.0, 8.0, 5.0))], 2, 0, 0);
        let mut b = oracle_bundle(&scene, &dir, 0.0, 0).unwrap();
        b.semantic.data_mut()[16 * 16 + 8 * 16 + 8] = f64::NAN;
        let r = train_heads(&[scene], &[b], &dir, &small_cfg(), &TrainHyper { steps: 3, ..TrainHyper::default() });
        assert!(matches!(r, Err(Error::Diverged(_))));
    }
}
