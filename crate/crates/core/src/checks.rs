//! Finite-difference checks of every differentiable kernel, shared by the `gradcheck`
//! command and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_backward, backbone_forward, dense_losses, BackboneParams};
use crate::conv::{conv2d, conv2d_backward, ConvParams};
use crate::direction::{DirectionConfig, DirectionLabelMap};
use crate::error::Result;
use crate::gradcheck::{gradcheck_subset, GradCheckReport};
use crate::heads::{mask_target, roi_loss_backward, BundleGrads, HeadConfig, HeadParams, LogitsBundle};
use crate::loss::{bce_loss, softmax_ce_loss};
use crate::mask::Mask;
use crate::offset_net::OffsetNet;
use crate::roi::{
    crop_and_resize, crop_and_resize_backward, deformable_crop_and_resize, deformable_crop_and_resize_backward,
    deformable_sample_points, direction_pool, direction_pool_backward, RoiBox, SubBoxOffsets,
};
use crate::tensor::Tensor4;

/// Tolerance for kernels whose composition is smooth at the checked point.
pub const TOL: f64 = 1e-4;
/// Tolerance for the offset net evaluated through the deformable crop.
pub const TOL_OFFSET_NET: f64 = 1e-3;
pub const EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub passed: bool,
}

impl KernelCheck {
    fn new(name: &str, report: &GradCheckReport, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            max_rel_error: report.max_rel_error,
            tolerance,
            checked: report.per_param_errors.len(),
            passed: report.max_rel_error < tolerance,
        }
    }
}

fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4 {
    Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

/// Every index when small, otherwise an even stride of about `max` indices.
fn spread(n: usize, max: usize) -> Vec<usize> {
    (0..n).step_by(n.div_ceil(max).max(1)).collect()
}

/// Scalar probe `<g, y>` so that the gradient with respect to `y` is `g`.
fn probe(g: &Tensor4, y: &Tensor4) -> f64 {
    g.dot(y).expect("probe shapes agree")
}

fn random_box(h: usize, w: usize, rng: &mut ChaCha8Rng) -> RoiBox {
    let x0 = rng.random_range(-1.0..w as f64 * 0.4);
    let y0 = rng.random_range(-1.0..h as f64 * 0.4);
    let x1 = x0 + rng.random_range(2.0..w as f64 * 0.6);
    let y1 = y0 + rng.random_range(2.0..h as f64 * 0.6);
    RoiBox::new(x0, y0, x1, y1, 1, 1.0).expect("positive extent")
}

/// Distance from a coordinate to the nearest bilinear kink (pixel centres and the map edges
/// both sit at half-integers in pixel-edge coordinates).
fn kink_distance(v: f64) -> f64 {
    let u = v - 0.5;
    (u - u.round()).abs()
}

fn kink_free(points: &[(f64, f64)], margin: f64) -> bool {
    points.iter().all(|&(x, y)| kink_distance(x) > margin && kink_distance(y) > margin)
}

pub fn check_conv2d(seed: u64) -> Result<Vec<KernelCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor([2, 3, 6, 5], &mut rng);
    let mut p = ConvParams::init_uniform(4, 3, 5, &mut rng);
    p.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    let g = rand_tensor([2, 4, 6, 5], &mut rng);
    let input = gradcheck_subset(
        |t| {
            let xi = Tensor4::from_vec(x.shape(), t.to_vec()).expect("shape");
            let y = conv2d(&xi, &p).expect("conv");
            (probe(&g, &y), conv2d_backward(&xi, &p, &g).expect("conv backward").input.into_data())
        },
        x.data(),
        EPS,
        &spread(x.len(), 120),
    )?;
    let mut theta = Vec::new();
    p.push_flat(&mut theta);
    let params = gradcheck_subset(
        |t| {
            let mut q = p.clone();
            q.load_flat(t);
            let y = conv2d(&x, &q).expect("conv");
            let gr = conv2d_backward(&x, &q, &g).expect("conv backward");
            let mut flat = Vec::new();
            gr.push_flat(&mut flat);
            (probe(&g, &y), flat)
        },
        &theta,
        EPS,
        &spread(theta.len(), 120),
    )?;
    Ok(vec![
        KernelCheck::new("conv2d.input", &input, TOL),
        KernelCheck::new("conv2d.params", &params, TOL),
    ])
}

pub fn check_crop_and_resize(seed: u64) -> Result<Vec<KernelCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = rand_tensor([1, 2, 9, 11], &mut rng);
    let roi = random_box(9, 11, &mut rng);
    let g = rand_tensor([1, 2, 5, 6], &mut rng);
    let r = gradcheck_subset(
        |t| {
            let fi = Tensor4::from_vec(f.shape(), t.to_vec()).expect("shape");
            let y = crop_and_resize(&fi, &roi, 5, 6).expect("crop");
            (probe(&g, &y), crop_and_resize_backward(&fi, &roi, &g).expect("crop backward").into_data())
        },
        f.data(),
        EPS,
        &spread(f.len(), 200),
    )?;
    Ok(vec![KernelCheck::new("crop_and_resize", &r, TOL)])
}

fn kink_free_offsets(roi: &RoiBox, grid: usize, out: usize, rng: &mut ChaCha8Rng) -> SubBoxOffsets {
    loop {
        let offs = (0..grid * grid)
            .map(|_| [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)])
            .collect();
        let o = SubBoxOffsets::new(grid, offs).expect("offsets in range");
        if kink_free(&deformable_sample_points(roi, &o, out), 1e-3) {
            return o;
        }
    }
}

pub fn check_deformable(seed: u64) -> Result<Vec<KernelCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (out, first) = (6, 4);
    let f = rand_tensor([1, 2, 12, 12], &mut rng);
    let roi = RoiBox::new(2.3, 1.6, 9.9, 10.4, 1, 1.0)?;
    let offsets = kink_free_offsets(&roi, 2, out, &mut rng);
    let g = rand_tensor([1, 2, out, out], &mut rng);
    let features = gradcheck_subset(
        |t| {
            let fi = Tensor4::from_vec(f.shape(), t.to_vec()).expect("shape");
            let y = deformable_crop_and_resize(&fi, &roi, &offsets, out, first).expect("crop");
            let gr = deformable_crop_and_resize_backward(&fi, &roi, &offsets, out, first, &g).expect("backward");
            (probe(&g, &y), gr.features.into_data())
        },
        f.data(),
        EPS,
        &spread(f.len(), 200),
    )?;
    let theta: Vec<f64> = offsets.offsets().iter().flatten().copied().collect();
    let offs = gradcheck_subset(
        |t| {
            let o = SubBoxOffsets::new(2, t.chunks_exact(2).map(|c| [c[0], c[1]]).collect()).expect("offsets");
            let y = deformable_crop_and_resize(&f, &roi, &o, out, first).expect("crop");
            let gr = deformable_crop_and_resize_backward(&f, &roi, &o, out, first, &g).expect("backward");
            (probe(&g, &y), gr.offsets.iter().flatten().copied().collect())
        },
        &theta,
        EPS,
        &spread(theta.len(), 16),
    )?;

    // the offset net driving the deformable crop from a first-stage crop of the same features
    let mut net = OffsetNet::init(2, 4, 2, &mut rng);
    net.fc.weight = rand_tensor(net.fc.weight.shape(), &mut rng).scale(0.5);
    let stage1 = crop_and_resize(&f, &roi, first, first)?;
    let mut theta = Vec::new();
    net.push_flat(&mut theta);
    let run = |t: &[f64]| {
        let mut n = net.clone();
        n.load_flat(t);
        let (o, cache) = n.forward(&stage1).expect("offset net");
        let y = deformable_crop_and_resize(&f, &roi, &o, out, first).expect("crop");
        let gr = deformable_crop_and_resize_backward(&f, &roi, &o, out, first, &g).expect("backward");
        let ng = n.backward(&cache, &gr.offsets).expect("offset net backward");
        let mut flat = Vec::new();
        ng.net.push_flat(&mut flat);
        (probe(&g, &y), flat, o)
    };
    let (_, _, o0) = run(&theta);
    let margin_ok = kink_free(&deformable_sample_points(&roi, &o0, out), 1e-3);
    let net_report = gradcheck_subset(
        |t| {
            let (v, gr, _) = run(t);
            (v, gr)
        },
        &theta,
        EPS,
        &spread(theta.len(), 120),
    )?;
    let mut net_check = KernelCheck::new("offset_net_through_deformable", &net_report, TOL_OFFSET_NET);
    net_check.passed &= margin_ok;
    Ok(vec![
        KernelCheck::new("deformable_crop_and_resize.features", &features, TOL),
        KernelCheck::new("deformable_crop_and_resize.offsets", &offs, TOL),
        net_check,
    ])
}

pub fn check_direction_pool(seed: u64) -> Result<Vec<KernelCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DirectionConfig::new(4, 2);
    let l = rand_tensor([1, cfg.num_channels(), 10, 10], &mut rng);
    let roi = random_box(10, 10, &mut rng);
    let out = 7;
    let g = rand_tensor([1, 1, out, out], &mut rng);
    let r = gradcheck_subset(
        |t| {
            let li = Tensor4::from_vec(l.shape(), t.to_vec()).expect("shape");
            let y = direction_pool(&li, &roi, &cfg, out).expect("pool");
            (probe(&g, &y), direction_pool_backward(&li, &roi, &cfg, &g).expect("pool backward").into_data())
        },
        l.data(),
        EPS,
        &spread(l.len(), 250),
    )?;
    Ok(vec![KernelCheck::new("direction_pool", &r, TOL)])
}

pub fn check_losses(seed: u64) -> Result<Vec<KernelCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = rand_tensor([1, 1, 4, 5], &mut rng).scale(3.0);
    let targets = Tensor4::from_fn([1, 1, 4, 5], |_, _, _, _| rng.random_range(0.0..1.0));
    let mask = Tensor4::from_fn([1, 1, 4, 5], |_, _, y, x| ((y + x) % 3 != 0) as u8 as f64);
    let bce = gradcheck_subset(
        |t| {
            let l = bce_loss(&Tensor4::from_vec(logits.shape(), t.to_vec()).expect("shape"), &targets, &mask)
                .expect("bce");
            (l.value, l.grad.into_data())
        },
        logits.data(),
        EPS,
        &spread(logits.len(), 20),
    )?;
    let ce_logits = rand_tensor([1, 3, 3, 3], &mut rng).scale(2.0);
    let classes: Vec<i32> = (0..9).map(|_| rng.random_range(0..3)).collect();
    let valid = Tensor4::from_fn([1, 1, 3, 3], |_, _, y, x| (y * 3 + x != 4) as u8 as f64);
    let ce = gradcheck_subset(
        |t| {
            let l = softmax_ce_loss(&Tensor4::from_vec(ce_logits.shape(), t.to_vec()).expect("shape"), &classes, &valid)
                .expect("ce");
            (l.value, l.grad.into_data())
        },
        ce_logits.data(),
        EPS,
        &spread(ce_logits.len(), 27),
    )?;
    Ok(vec![
        KernelCheck::new("bce_loss", &bce, TOL),
        KernelCheck::new("softmax_ce_loss", &ce, TOL),
    ])
}

fn random_bundle(dir: &DirectionConfig, hc: &[usize], h: usize, w: usize, rng: &mut ChaCha8Rng) -> LogitsBundle {
    LogitsBundle {
        semantic: rand_tensor([1, 3, h, w], rng),
        direction: rand_tensor([1, dir.num_channels(), h, w], rng),
        hypercolumns: hc.iter().map(|&c| rand_tensor([1, c, h, w], rng)).collect(),
        stride: 1,
    }
}

/// Mask losses through the coarse head and refinement, plain and deformable, with respect to
/// the head parameters.
pub fn check_mask_heads(seed: u64) -> Result<Vec<KernelCheck>> {
    let mut out = Vec::new();
    for deformable in [false, true] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + deformable as u64);
        let dir = DirectionConfig::new(4, 2);
        let cfg = HeadConfig {
            out: 8,
            refine_filters: 3,
            deformable,
            ..HeadConfig::default()
        };
        let b = random_bundle(&dir, &[1, 2], 12, 12, &mut rng);
        let mut p = HeadParams::init(&cfg, 3, seed);
        let mut flat = p.flat();
        flat.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        p.load_flat(&flat);
        let roi = RoiBox::new(1.7, 2.2, 10.4, 9.6, 2, 1.0)?;
        let mask = Mask::from_fn(12, 12, |y, x| (3..9).contains(&y) && (x + y) % 4 != 0);
        let target = mask_target(&mask, &roi, cfg.out);
        let r = gradcheck_subset(
            |t| {
                let mut q = p.clone();
                q.load_flat(t);
                let mut g = q.zeros_like();
                let l = roi_loss_backward(&b, &roi, &target, &dir, &q, &cfg, 1.0, &mut g, None).expect("loss");
                (l, g.flat())
            },
            &flat,
            EPS,
            &spread(flat.len(), 150),
        )?;
        let (name, tol) = if deformable {
            ("mask_heads.deformable", TOL_OFFSET_NET)
        } else {
            ("mask_heads", TOL)
        };
        out.push(KernelCheck::new(name, &r, tol));
    }
    Ok(out)
}

/// Dense and mask losses through the backbone with respect to its parameters.
pub fn check_backbone(seed: u64) -> Result<Vec<KernelCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (10, 12);
    let dir = DirectionConfig::new(4, 1);
    let image = Tensor4::from_fn([1, 3, h, w], |_, _, _, _| rng.random_range(0.0..1.0));
    let classes: Vec<usize> = (0..h * w).map(|p| ((p / w > 3) && (p % w > 4)) as usize).collect();
    let labels = DirectionLabelMap {
        h,
        w,
        labels: classes.iter().enumerate().map(|(p, &c)| if c == 1 { (p % 4) as i32 } else { -1 }).collect(),
    };
    let bb = BackboneParams::init(2, dir.num_channels(), 2, seed);
    let cfg = HeadConfig {
        out: 6,
        refine_filters: 3,
        ..HeadConfig::default()
    };
    let heads = HeadParams::init(&cfg, 48, seed);
    let roi = RoiBox::new(4.5, 3.5, 12.0, 10.0, 1, 1.0)?;
    let mask = Mask::from_fn(h, w, |y, x| classes[y * w + x] == 1);
    let target = mask_target(&mask, &roi, cfg.out);
    let theta = bb.flat();
    let r = gradcheck_subset(
        |t| {
            let mut p = bb.clone();
            p.load_flat(t);
            let (bundle, cache) = backbone_forward(&image, &p).expect("forward");
            let mut bg = BundleGrads::zeros_like(&bundle);
            let (ls, ld) = dense_losses(&bundle, &classes, &labels, &mut bg).expect("dense");
            let mut hg = heads.zeros_like();
            let lm = roi_loss_backward(&bundle, &roi, &target, &dir, &heads, &cfg, 1.0, &mut hg, Some(&mut bg))
                .expect("mask loss");
            (ls + ld + lm, backbone_backward(&p, &cache, &bg).expect("backward").flat())
        },
        &theta,
        EPS,
        &spread(theta.len(), 150),
    )?;
    Ok(vec![KernelCheck::new("backbone", &r, TOL)])
}

/// Runs every check with inputs derived from `seed`.
pub fn run_all(seed: u64) -> Result<Vec<KernelCheck>> {
    let mut all = Vec::new();
    all.extend(check_conv2d(seed)?);
    all.extend(check_crop_and_resize(seed + 1)?);
    all.extend(check_deformable(seed + 2)?);
    all.extend(check_direction_pool(seed + 3)?);
    all.extend(check_losses(seed + 4)?);
    all.extend(check_mask_heads(seed + 5)?);
    all.extend(check_backbone(seed + 7)?);
    Ok(all)
}

pub fn format_report(checks: &[KernelCheck]) -> String {
    let mut s = format!("{:<40} {:>12} {:>10} {:>8}  result\n", "kernel", "max_rel_err", "tolerance", "checked");
    for c in checks {
        s.push_str(&format!(
            "{:<40} {:>12.3e} {:>10.0e} {:>8}  {}\n",
            c.name,
            c.max_rel_error,
            c.tolerance,
            c.checked,
            if c.passed { "pass" } else { "FAIL" }
        ));
    }
    s
}
