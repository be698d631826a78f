//! Acceptance criteria. Each test prints one `ACCEPTANCE <n> ... PASS|FAIL` line with the
//! measured values and the pinned tolerances, then asserts unless the criterion is marked as
//! reported-only (see README, "Acceptance suite").
//!
//! Tests take a shared lock so that wall-clock budgets are measured without other criteria
//! competing for the CPU.

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use dirmask_core::checks::{self, KernelCheck};
use dirmask_core::config::{Mode, PipelineConfig};
use dirmask_core::direction::{encode_instance, CenterFrame, DirectionConfig, DirectionLabelMap};
use dirmask_core::eval::{average_precision, ScoredMask};
use dirmask_core::heads::{coarse_mask, HeadConfig, HeadParams, LogitsBundle};
use dirmask_core::pipeline::{cmd_ablate, evaluate_model, load_model, AblationAxis, AblationTable, ModelEval};
use dirmask_core::roi::{crop_and_resize, deformable_crop_and_resize, direction_pool, RoiBox, SubBoxOffsets};
use dirmask_core::synth::{generate_scenes, rasterize_disk, rasterize_rect, Instance, SynthConfig};
use dirmask_core::{Mask, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the criterion line; asserts when `enforced`.
fn report(id: &str, name: &str, passed: bool, detail: &str, enforced: bool) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    let note = if enforced || passed { "" } else { " (reported only)" };
    println!("ACCEPTANCE {} {}: {}{} | {}", id, name, verdict, note, detail);
    if enforced {
        assert!(passed, "acceptance {} failed: {}", id, detail);
    }
}

fn within(elapsed: Duration, budget_s: f64) -> bool {
    elapsed.as_secs_f64() < budget_s
}

fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4 {
    Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(-2.0..2.0))
}

fn random_box(h: usize, w: usize, rng: &mut ChaCha8Rng) -> RoiBox {
    let x0 = rng.random_range(-2.0..w as f64 * 0.6);
    let y0 = rng.random_range(-2.0..h as f64 * 0.6);
    let bw = rng.random_range(0.5..w as f64 * 0.8);
    let bh = rng.random_range(0.5..h as f64 * 0.8);
    RoiBox::new(x0, y0, x0 + bw, y0 + bh, 1, 1.0).unwrap()
}

/// Exact unit vector table for multiples of 45 degrees; other boundaries use cos/sin.
fn boundary_vector(k: usize, d: usize) -> (f64, f64) {
    if (8 * k) % d == 0 {
        const EXACT: [(f64, f64); 8] = [
            (1.0, 0.0),
            (1.0, 1.0),
            (0.0, 1.0),
            (-1.0, 1.0),
            (-1.0, 0.0),
            (-1.0, -1.0),
            (0.0, -1.0),
            (1.0, -1.0),
        ];
        return EXACT[8 * k / d];
    }
    let t = std::f64::consts::TAU * k as f64 / d as f64;
    (t.cos(), t.sin())
}

/// Angular order on directions starting at +x and turning counter-clockwise (y up).
fn angle_le(u: (f64, f64), v: (f64, f64)) -> bool {
    let half = |p: (f64, f64)| !(p.1 > 0.0 || (p.1 == 0.0 && p.0 > 0.0));
    let (hu, hv) = (half(u), half(v));
    if hu != hv {
        return !hu;
    }
    u.0 * v.1 - u.1 * v.0 >= 0.0
}

/// Brute-force region of cell `(i, j)`: integer cell-centre numerators, sector by counting
/// boundary rays at or before the cell's direction, bin by integer comparison against `k / B`.
fn reference_region(i: usize, j: usize, out: usize, d: usize, b: usize) -> usize {
    let x = 2 * j as i64 + 1 - out as i64;
    let y = -(2 * i as i64 + 1 - out as i64);
    if x == 0 && y == 0 {
        return 0;
    }
    let p = (x as f64, y as f64);
    let sector = (1..d).filter(|&k| angle_le(boundary_vector(k, d), p)).count();
    let n = x.abs().max(y.abs());
    let bin = (1..b as i64).filter(|&k| k * (out as i64) < n * b as i64).count();
    sector * b + bin
}

#[test]
fn criterion_1_direction_pool_oracle() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut mismatches = 0usize;
    let mut cells = 0usize;
    for case in 0..100 {
        let d = [2, 4, 6, 8][case % 4];
        let b = [1, 2, 4][(case / 4) % 3];
        let cfg = DirectionConfig::new(d, b);
        let (h, w) = (rng.random_range(6..24), rng.random_range(6..24));
        let logits = rand_tensor([1, d * b, h, w], &mut rng);
        let roi = random_box(h, w, &mut rng);
        let out = rng.random_range(1..22);
        let got = direction_pool(&logits, &roi, &cfg, out).unwrap();
        let all = crop_and_resize(&logits, &roi, out, out).unwrap();
        for i in 0..out {
            for j in 0..out {
                let k = reference_region(i, j, out, d, b);
                cells += 1;
                if got.get(0, 0, i, j).to_bits() != all.get(0, k, i, j).to_bits() {
                    mismatches += 1;
                }
            }
        }
    }
    let el = t.elapsed();
    report(
        "1",
        "direction_pool equals brute-force reference (bitwise)",
        mismatches == 0 && within(el, 10.0),
        &format!("100 cases, {} cells, {} mismatches; {:.2?} (budget 10 s)", cells, mismatches, el),
        true,
    );
}

#[test]
fn criterion_2_gradient_checks() {
    let _g = serial();
    let t = Instant::now();
    let seed = 2;
    let mut all: Vec<KernelCheck> = Vec::new();
    all.extend(checks::check_conv2d(seed).unwrap());
    all.extend(checks::check_crop_and_resize(seed).unwrap());
    all.extend(checks::check_deformable(seed).unwrap());
    all.extend(checks::check_direction_pool(seed).unwrap());
    all.extend(checks::check_losses(seed).unwrap());
    let el = t.elapsed();
    print!("{}", checks::format_report(&all));
    let tol_ok = all.iter().all(|c| {
        let pinned = if c.name == "offset_net_through_deformable" { 1e-3 } else { 1e-4 };
        c.tolerance <= pinned
    });
    let worst = all.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    report(
        "2",
        "finite-difference gradient checks",
        tol_ok && all.iter().all(|c| c.passed) && within(el, 60.0),
        &format!(
            "{} checks, worst max_rel_error {:.2e} (tol 1e-4; offset net 1e-3); {:.2?} (budget 60 s)",
            all.len(),
            worst,
            el
        ),
        true,
    );
}

#[test]
fn criterion_3_deformable_identity() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut equal = 0;
    for _ in 0..50 {
        let (h, w, c) = (rng.random_range(4..20), rng.random_range(4..20), rng.random_range(1..4));
        let f = rand_tensor([1, c, h, w], &mut rng);
        let roi = random_box(h, w, &mut rng);
        let grid = rng.random_range(1..4);
        let first = grid * rng.random_range(1..4);
        let out = rng.random_range(1..30);
        let a = deformable_crop_and_resize(&f, &roi, &SubBoxOffsets::zeros(grid), out, first).unwrap();
        let b = crop_and_resize(&f, &roi, out, out).unwrap();
        if a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()) {
            equal += 1;
        }
    }
    let el = t.elapsed();
    report(
        "3",
        "zero-offset deformable crop bit-equals plain crop",
        equal == 50 && within(el, 5.0),
        &format!("{}/50 bit-equal; {:.2?} (budget 5 s)", equal, el),
        true,
    );
}

fn oracle_end_to_end() -> ModelEval {
    let cfg = PipelineConfig::default();
    let scenes = generate_scenes(&cfg.synth, 0, 50).unwrap();
    let model = load_model(&cfg, None).unwrap();
    evaluate_model(&cfg, &model, &scenes).unwrap()
}

#[test]
fn criterion_4_oracle_end_to_end() {
    let _g = serial();
    let t = Instant::now();
    let e = oracle_end_to_end();
    let el = t.elapsed();
    let map50 = e.refined.map(0.5).unwrap();
    let worst = e
        .refined
        .per_scene
        .iter()
        .map(|s| s.mean_iou)
        .fold(f64::INFINITY, f64::min);
    report(
        "4",
        "oracle bundles + initialized heads on 50 scenes",
        map50 == 1.0 && e.refined.mean_iou >= 0.90 && within(el, 60.0),
        &format!(
            "mAP@0.5 {:.4} (need 1.0), mean IoU {:.4} (need >= 0.90), worst scene mean IoU {:.4}; {:.2?} (budget 60 s)",
            map50, e.refined.mean_iou, worst, el
        ),
        true,
    );
}

/// Desk-scale trend setup: the overlapping two-disk layout with a jointly trained backbone
/// whose logits sit at stride 2 below full-resolution hypercolumns. Feature rows train without
/// refinement, as in the feature ablation; the refinement row adds both hypercolumn sources to
/// the 4-bin model.
fn trend_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default().with_seed(TREND_SEED);
    cfg.mode = Mode::Backbone;
    cfg.synth = SynthConfig {
        seed: TREND_SEED,
        ..SynthConfig::two_disk()
    };
    cfg.direction = DirectionConfig::new(8, 1);
    cfg.head = HeadConfig {
        out: 21,
        refine_filters: 32,
        refine_sources: Vec::new(),
        ..HeadConfig::default()
    };
    cfg.backbone.steps = 3000;
    cfg.backbone.lr = 0.02;
    cfg.backbone.decay_at = 0.7;
    cfg.backbone.logit_stride = 2;
    cfg.ablate.train_scenes = 100;
    cfg.ablate.test_scenes = 20;
    cfg
}

const TREND_SEED: u64 = 0;

#[derive(serde::Serialize)]
struct TrendTables {
    features: AblationTable,
    distance_bins: AblationTable,
    refinement: AblationTable,
}

fn run_trend() -> (TrendTables, Duration) {
    let t = Instant::now();
    let cfg = trend_config();
    let features = cmd_ablate(&cfg, AblationAxis::Features, &AblationAxis::Features.default_values()).unwrap();
    let distance_bins = cmd_ablate(&cfg, AblationAxis::DistanceBins, &["4".to_string()]).unwrap();
    let four_bins = AblationAxis::DistanceBins.apply(&cfg, "4").unwrap();
    let refinement = cmd_ablate(&four_bins, AblationAxis::Refinement, &["0+1".to_string()]).unwrap();
    (
        TrendTables {
            features,
            distance_bins,
            refinement,
        },
        t.elapsed(),
    )
}

fn trend() -> &'static (TrendTables, Duration) {
    static TREND: OnceLock<(TrendTables, Duration)> = OnceLock::new();
    TREND.get_or_init(run_trend)
}

fn map75(t: &AblationTable, value: &str) -> f64 {
    t.row(value).unwrap().eval.refined.map(0.75).unwrap()
}

#[test]
fn criterion_5_feature_trend() {
    let _g = serial();
    let (tables, el) = trend();
    print!(
        "{}{}{}",
        tables.features.to_table(),
        tables.distance_bins.to_table(),
        tables.refinement.to_table()
    );
    let sem = map75(&tables.features, "semantic");
    let dir = map75(&tables.features, "direction");
    let both1 = map75(&tables.features, "both");
    let both4 = map75(&tables.distance_bins, "4");
    let passed = dir >= sem + 0.02 && both1 >= dir + 0.02 && both4 >= both1 && within(*el, 900.0);
    report(
        "5",
        "feature ablation ordering on two-disk scenes (mAP@0.75)",
        passed,
        &format!(
            "semantic {:.4} < direction {:.4} < both {:.4} <= both/4 bins {:.4} (strict margins 0.02); {:.1?} (budget 900 s with 6)",
            sem, dir, both1, both4, el
        ),
        true,
    );
}

#[test]
fn criterion_6_refinement_trend() {
    let _g = serial();
    let (tables, el) = trend();
    let baseline = tables.distance_bins.row("4").unwrap().eval.refined.boundary_f;
    let row = &tables.refinement.row("0+1").unwrap().eval;
    let (own_coarse, refined) = (row.coarse.boundary_f, row.refined.boundary_f);
    report(
        "6",
        "refinement with both hypercolumn sources improves boundary F",
        refined >= own_coarse + 0.02 && refined >= baseline + 0.02 && within(*el, 900.0),
        &format!(
            "refined {:.4} vs its own coarse masks {:.4} ({:+.4}) and vs the model trained without \
             refinement {:.4} ({:+.4}), need >= 0.02 each; {:.1?} shared with 5",
            refined,
            own_coarse,
            refined - own_coarse,
            baseline,
            refined - baseline,
            el
        ),
        true,
    );
}

fn metrics_bytes(oracle: &ModelEval, trend: &TrendTables) -> Vec<u8> {
    #[derive(serde::Serialize)]
    struct Metrics<'a> {
        oracle: &'a ModelEval,
        trend: &'a TrendTables,
    }
    serde_json::to_vec_pretty(&Metrics { oracle, trend }).unwrap()
}

#[test]
fn criterion_7_determinism() {
    let _g = serial();
    let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    let first = metrics_bytes(&oracle_end_to_end(), &trend().0);
    let second = metrics_bytes(&oracle_end_to_end(), &run_trend().0);
    let (a, b) = (dir.join("metrics_run1.json"), dir.join("metrics_run2.json"));
    std::fs::write(&a, &first).unwrap();
    std::fs::write(&b, &second).unwrap();
    let same = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    report(
        "7",
        "criteria 4-6 rerun with the same seeds give identical metrics files",
        same,
        &format!("{} bytes each, {}", first.len(), dir.display()),
        true,
    );
}

fn labels_of(mask: &Mask, cfg: &DirectionConfig) -> DirectionLabelMap {
    let mut l = DirectionLabelMap::background(mask.height(), mask.width());
    encode_instance(mask, cfg, &mut l).unwrap();
    l
}

fn random_shape(n: usize, rng: &mut ChaCha8Rng) -> Mask {
    let c = n as f64 / 2.0;
    let (cx, cy) = (c + rng.random_range(-4.0..4.0), c + rng.random_range(-4.0..4.0));
    if rng.random_bool(0.5) {
        rasterize_disk(n, n, cx, cy, rng.random_range(6.0..14.0))
    } else {
        rasterize_rect(n, n, cx, cy, rng.random_range(4.0..14.0), rng.random_range(4.0..14.0))
    }
}

/// Fraction of foreground pixels whose label, rotated by a quarter turn, matches the label of
/// the rotated mask.
fn rotation_agreement(frame: CenterFrame, rng: &mut ChaCha8Rng) -> f64 {
    let (mut ok, mut total) = (0usize, 0usize);
    for d in [4, 8] {
        for b in [1, 2, 4] {
            let cfg = DirectionConfig::new(d, b).with_frame(frame);
            for _ in 0..5 {
                let m = random_shape(40, rng);
                let l = labels_of(&m, &cfg);
                let r = labels_of(&m.rotate90_ccw(), &cfg);
                for (y, x) in m.foreground() {
                    let k = l.get(y, x) as usize;
                    let (s, bin) = (k / b, k % b);
                    let expect = ((s + d / 4) % d) * b + bin;
                    // (y, x) moves to (w - 1 - x, y) under the displayed counter-clockwise turn
                    ok += (r.get(m.width() - 1 - x, y) as usize == expect) as usize;
                    total += 1;
                }
            }
        }
    }
    ok as f64 / total as f64
}

/// Fraction of foreground pixels whose distance bin reappears in their 2x2 block after nearest
/// 2x upsampling about the mask (half-pixel grid tolerance), and the strict per-sub-pixel rate.
fn scale_agreement(frame: CenterFrame, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let (mut ok, mut strict, mut total) = (0usize, 0usize, 0usize);
    for b in [2, 4] {
        let cfg = DirectionConfig::new(8, b).with_frame(frame);
        for _ in 0..5 {
            let m = random_shape(40, rng);
            let l = labels_of(&m, &cfg);
            let s = labels_of(&m.upsample2(), &cfg);
            for (y, x) in m.foreground() {
                let bin = l.get(y, x) as usize % b;
                let sub: Vec<usize> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(dy, dx)| s.get(2 * y + dy, 2 * x + dx) as usize % b)
                    .collect();
                ok += sub.contains(&bin) as usize;
                strict += sub.iter().filter(|&&v| v == bin).count();
                total += 1;
            }
        }
    }
    (ok as f64 / total as f64, strict as f64 / (4 * total) as f64)
}

fn crop_linearity(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let (h, w) = (rng.random_range(4..16), rng.random_range(4..16));
        let x = rand_tensor([1, 2, h, w], rng);
        let y = rand_tensor([1, 2, h, w], rng);
        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let roi = random_box(h, w, rng);
        let lhs = crop_and_resize(&x.scale(a).add(&y.scale(b)).unwrap(), &roi, 7, 5).unwrap();
        let rhs = crop_and_resize(&x, &roi, 7, 5)
            .unwrap()
            .scale(a)
            .add(&crop_and_resize(&y, &roi, 7, 5).unwrap().scale(b))
            .unwrap();
        for (p, q) in lhs.data().iter().zip(rhs.data()) {
            worst = worst.max((p - q).abs());
        }
    }
    worst
}

/// Maximum difference between crops of shifted features and shifted boxes, over cells whose
/// bilinear taps stay inside both maps.
fn crop_translation(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let (h, w) = (20, 20);
        let f = rand_tensor([1, 1, h, w], rng);
        let (dy, dx) = (rng.random_range(-3i64..=3), rng.random_range(-3i64..=3));
        let g = Tensor4::from_fn([1, 1, h, w], |_, _, y, x| {
            let (sy, sx) = (y as i64 - dy, x as i64 - dx);
            if (0..h as i64).contains(&sy) && (0..w as i64).contains(&sx) {
                f.get(0, 0, sy as usize, sx as usize)
            } else {
                0.0
            }
        });
        let x0 = rng.random_range(5.0..8.0);
        let y0 = rng.random_range(5.0..8.0);
        let roi = RoiBox::new(x0, y0, x0 + rng.random_range(1.0..6.0), y0 + rng.random_range(1.0..6.0), 1, 1.0).unwrap();
        let moved = roi.translated(dx as f64, dy as f64);
        let a = crop_and_resize(&f, &roi, 6, 6).unwrap();
        let b = crop_and_resize(&g, &moved, 6, 6).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            worst = worst.max((p - q).abs());
        }
    }
    worst
}

fn permutation_invariance(rng: &mut ChaCha8Rng) -> bool {
    let dir = DirectionConfig::default();
    let cfg = HeadConfig {
        out: 9,
        refine_filters: 4,
        ..HeadConfig::default()
    };
    let params = HeadParams::init(&cfg, 2, 5);
    (0..10).all(|_| {
        let b = LogitsBundle {
            semantic: rand_tensor([1, 4, 16, 16], rng),
            direction: rand_tensor([1, dir.num_channels(), 16, 16], rng),
            hypercolumns: vec![rand_tensor([1, 1, 16, 16], rng), rand_tensor([1, 1, 16, 16], rng)],
            stride: 1,
        };
        let mut perm = [0usize, 1, 2, 3];
        for i in (2..4).rev() {
            perm.swap(i, rng.random_range(1..=i));
        }
        let mut pb = b.clone();
        for (old, &new) in perm.iter().enumerate() {
            pb.semantic.plane_mut(0, new).copy_from_slice(b.semantic.plane(0, old));
        }
        let roi = RoiBox::new(1.5, 2.5, 13.0, 14.5, rng.random_range(1..4), 1.0).unwrap();
        let moved = RoiBox { label: perm[roi.label], ..roi };
        coarse_mask(&b, &roi, &dir, &params, &cfg).unwrap() == coarse_mask(&pb, &moved, &dir, &params, &cfg).unwrap()
    })
}

fn ap_monotone(rng: &mut ChaCha8Rng) -> bool {
    (0..20).all(|_| {
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..3 {
            let g: Vec<Instance> = (0..rng.random_range(0..3))
                .map(|_| Instance::new(rng.random_range(1..3), random_shape(40, rng)))
                .collect();
            let p: Vec<ScoredMask> = (0..rng.random_range(0..4))
                .map(|_| ScoredMask {
                    label: rng.random_range(1..3),
                    score: rng.random_range(0.0..1.0),
                    mask: random_shape(40, rng),
                })
                .collect();
            preds.push(p);
            gts.push(g);
        }
        let aps: Vec<f64> = (0..=20)
            .map(|k| average_precision(&preds, &gts, k as f64 / 20.0).unwrap())
            .collect();
        aps.windows(2).all(|w| w[1] <= w[0])
    })
}

#[test]
fn criterion_8_invariance_suite() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    // worst of the box frame (default) and the centroid frame
    let (mut rot, mut scale, mut scale_strict) = (1.0f64, 1.0f64, 1.0f64);
    for frame in [CenterFrame::Box, CenterFrame::Centroid] {
        rot = rot.min(rotation_agreement(frame, &mut rng));
        let (s, strict) = scale_agreement(frame, &mut rng);
        scale = scale.min(s);
        scale_strict = scale_strict.min(strict);
    }
    let lin = crop_linearity(&mut rng);
    let trans = crop_translation(&mut rng);
    let perm = permutation_invariance(&mut rng);
    let mono = ap_monotone(&mut rng);
    let el = t.elapsed();
    let passed = rot >= 0.99 && scale >= 0.99 && lin <= 1e-12 && trans <= 1e-12 && perm && mono && within(el, 60.0);
    report(
        "8",
        "invariance suite",
        passed,
        &format!(
            "both label frames: rotation {:.4} (>= 0.99), bin scale {:.4} (>= 0.99; strict {:.4}), crop linearity {:.1e} (<= 1e-12), \
             crop translation {:.1e} (<= 1e-12), channel permutation {}, AP monotone {}; {:.2?} (budget 60 s)",
            rot, scale, scale_strict, lin, trans, perm, mono, el
        ),
        true,
    );
}
