//! Mask IoU, COCO-style mask average precision, and boundary F-score.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::mask::Mask;
use crate::synth::Instance;

/// Default boundary matching tolerance in pixels.
pub const BOUNDARY_TOL: usize = 2;

/// `|a & b| / |a | b|`, with two empty masks defined to have IoU 1.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if !a.same_dims(b) {
        return shape_err(format!(
            "mask dims {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// F1 of the two boundary pixel sets, a boundary pixel counting as matched when the other set
/// has a pixel within Chebyshev distance `tol`. Both boundaries empty gives 1.
pub fn boundary_f(pred: &Mask, gt: &Mask, tol: usize) -> Result<f64> {
    if !pred.same_dims(gt) {
        return shape_err("boundary_f masks differ in size");
    }
    let (bp, bg) = (pred.boundary(), gt.boundary());
    let (np, ng) = (bp.count(), bg.count());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let (dp, dg) = (bp.dilate(tol), bg.dilate(tol));
    let matched = |b: &Mask, near: &Mask| b.data().iter().zip(near.data()).filter(|(&x, &y)| x && y).count();
    let precision = matched(&bp, &dg) as f64 / np as f64;
    let recall = matched(&bg, &dp) as f64 / ng as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredMask {
    pub label: usize,
    pub score: f64,
    pub mask: Mask,
}

fn check_inputs(predictions: &[Vec<ScoredMask>], groundtruth: &[Vec<Instance>]) -> Result<()> {
    if predictions.len() != groundtruth.len() {
        return shape_err(format!(
            "{} prediction scenes vs {} ground-truth scenes",
            predictions.len(),
            groundtruth.len()
        ));
    }
    for p in predictions.iter().flatten() {
        if !(0.0..=1.0).contains(&p.score) {
            return arg_err(format!("prediction score {} outside [0, 1]", p.score));
        }
    }
    Ok(())
}

/// 101-point interpolated precision over recall.
fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut total = 0.0;
    let mut at = 0;
    for r in 0..=100 {
        let thr = r as f64 / 100.0;
        while at < recall.len() && recall[at] < thr - 1e-12 {
            at += 1;
        }
        if at < recall.len() {
            total += precision[at];
        }
    }
    total / 101.0
}

/// COCO-style mask AP at one IoU threshold, averaged over the classes that have ground truth.
///
/// Per class, predictions from all scenes are sorted by descending score (ties keep input
/// order) and each is greedily matched to the unmatched same-class ground truth of its scene
/// with the highest IoU at or above `iou_thresh`. With no ground truth at all the result is 1
/// when there are no predictions and 0 otherwise.
pub fn average_precision(predictions: &[Vec<ScoredMask>], groundtruth: &[Vec<Instance>], iou_thresh: f64) -> Result<f64> {
    check_inputs(predictions, groundtruth)?;
    let mut classes: BTreeMap<usize, usize> = BTreeMap::new();
    for g in groundtruth.iter().flatten() {
        *classes.entry(g.label).or_default() += 1;
    }
    if classes.is_empty() {
        return Ok(if predictions.iter().all(|p| p.is_empty()) { 1.0 } else { 0.0 });
    }
    let mut sum = 0.0;
    for (&label, &num_gt) in &classes {
        let mut order: Vec<(usize, &ScoredMask)> = predictions
            .iter()
            .enumerate()
            .flat_map(|(s, ps)| ps.iter().filter(|p| p.label == label).map(move |p| (s, p)))
            .collect();
        order.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut used: Vec<Vec<bool>> = groundtruth.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = Vec::with_capacity(order.len());
        for (s, p) in order {
            let mut best: Option<(usize, f64)> = None;
            for (k, g) in groundtruth[s].iter().enumerate() {
                if g.label != label || used[s][k] {
                    continue;
                }
                let iou = mask_iou(&p.mask, &g.mask)?;
                if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((k, iou));
                }
            }
            if let Some((k, _)) = best {
                used[s][k] = true;
            }
            tp.push(best.is_some());
        }
        sum += interpolated_ap(&tp, num_gt);
    }
    Ok(sum / classes.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub index: usize,
    pub instances: usize,
    pub mean_iou: f64,
    pub boundary_f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// AP keyed by the IoU threshold formatted with two decimals.
    pub map_at: BTreeMap<String, f64>,
    /// Mean over ground-truth instances of the best same-class prediction IoU.
    pub mean_iou: f64,
    /// Mean over ground-truth instances of the boundary F-score of that best prediction.
    pub boundary_f: f64,
    pub per_scene: Vec<SceneEval>,
}

pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.5, 0.75];

pub fn threshold_key(t: f64) -> String {
    format!("{:.2}", t)
}

pub fn evaluate(
    predictions: &[Vec<ScoredMask>],
    groundtruth: &[Vec<Instance>],
    thresholds: &[f64],
    tol: usize,
) -> Result<EvalResult> {
    check_inputs(predictions, groundtruth)?;
    let mut map_at = BTreeMap::new();
    for &t in thresholds {
        map_at.insert(threshold_key(t), average_precision(predictions, groundtruth, t)?);
    }
    let mut per_scene = Vec::with_capacity(groundtruth.len());
    let (mut iou_sum, mut bf_sum, mut n) = (0.0, 0.0, 0usize);
    for (index, (preds, gts)) in predictions.iter().zip(groundtruth).enumerate() {
        let (mut s_iou, mut s_bf) = (0.0, 0.0);
        for g in gts {
            let mut best: Option<(f64, &ScoredMask)> = None;
            for p in preds.iter().filter(|p| p.label == g.label) {
                let iou = mask_iou(&p.mask, &g.mask)?;
                if best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, p));
                }
            }
            if let Some((iou, p)) = best {
                s_iou += iou;
                s_bf += boundary_f(&p.mask, &g.mask, tol)?;
            }
        }
        let k = gts.len();
        iou_sum += s_iou;
        bf_sum += s_bf;
        n += k;
        let avg = |v: f64| if k == 0 { 1.0 } else { v / k as f64 };
        per_scene.push(SceneEval {
            index,
            instances: k,
            mean_iou: avg(s_iou),
            boundary_f: avg(s_bf),
        });
    }
    let avg = |v: f64| if n == 0 { 1.0 } else { v / n as f64 };
    Ok(EvalResult {
        map_at,
        mean_iou: avg(iou_sum),
        boundary_f: avg(bf_sum),
        per_scene,
    })
}

impl EvalResult {
    pub fn map(&self, t: f64) -> Option<f64> {
        self.map_at.get(&threshold_key(t)).copied()
    }

    /// One aligned line: every mAP column followed by mean IoU and boundary F.
    pub fn table_row(&self, name: &str) -> String {
        let mut s = format!("{:<24}", name);
        for v in self.map_at.values() {
            s.push_str(&format!(" {:>9.4}", v));
        }
        s.push_str(&format!(" {:>9.4} {:>9.4}", self.mean_iou, self.boundary_f));
        s
    }

    pub fn table_header(&self) -> String {
        let mut s = format!("{:<24}", "run");
        for k in self.map_at.keys() {
            s.push_str(&format!(" {:>9}", format!("mAP@{}", k)));
        }
        s.push_str(&format!(" {:>9} {:>9}", "mIoU", "bndF"));
        s
    }

    pub fn to_table(&self) -> String {
        format!("{}\n{}\n", self.table_header(), self.table_row("eval"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Mask {
        Mask::from_fn(h, w, |y, x| y >= y0 && y < y1 && x >= x0 && x < x1)
    }

    #[test]
    fn iou_basics() {
        let a = rect(10, 10, 0, 0, 4, 4);
        let b = rect(10, 10, 0, 2, 4, 6);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &rect(10, 10, 5, 5, 9, 9)).unwrap(), 0.0);
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mask_iou(&Mask::new(3, 3), &Mask::new(3, 3)).unwrap(), 1.0);
        assert!(mask_iou(&a, &Mask::new(3, 3)).is_err());
    }

    #[test]
    fn ap_single_prediction_at_iou_0_6() {
        // 3x5 prediction against 3x3 ground truth sharing 9 pixels: 9 / 15 = 0.6
        let gt = rect(10, 10, 0, 0, 3, 3);
        let pred = rect(10, 10, 0, 0, 3, 5);
        assert!((mask_iou(&pred, &gt).unwrap() - 0.6).abs() < 1e-15);
        let g = vec![vec![Instance::new(1, gt)]];
        let p = vec![vec![ScoredMask { label: 1, score: 0.9, mask: pred }]];
        assert_eq!(average_precision(&p, &g, 0.5).unwrap(), 1.0);
        assert_eq!(average_precision(&p, &g, 0.75).unwrap(), 0.0);
    }

    #[test]
    fn ap_edge_cases() {
        let gt = rect(8, 8, 1, 1, 5, 5);
        let g = vec![vec![Instance::new(1, gt.clone())]];
        assert_eq!(average_precision(&[vec![]], &g, 0.5).unwrap(), 0.0);
        let perfect = vec![vec![ScoredMask { label: 1, score: 0.3, mask: gt.clone() }]];
        assert_eq!(average_precision(&perfect, &g, 0.95).unwrap(), 1.0);
        // the right mask with the wrong class is a false positive
        let wrong = vec![vec![ScoredMask { label: 2, score: 0.3, mask: gt }]];
        assert_eq!(average_precision(&wrong, &g, 0.5).unwrap(), 0.0);
        assert!(average_precision(&[vec![], vec![]], &g, 0.5).is_err());
    }

    #[test]
    fn ap_hand_evaluated_curve() {
        // scores: fp 0.9, tp 0.8, tp 0.7 over 2 ground truths.
        // precision envelope is 2/3 for every recall level up to 1.
        let a = rect(10, 10, 0, 0, 3, 3);
        let b = rect(10, 10, 5, 5, 9, 9);
        let g = vec![vec![Instance::new(1, a.clone()), Instance::new(1, b.clone())]];
        let p = vec![vec![
            ScoredMask { label: 1, score: 0.9, mask: rect(10, 10, 0, 5, 2, 8) },
            ScoredMask { label: 1, score: 0.8, mask: a },
            ScoredMask { label: 1, score: 0.7, mask: b },
        ]];
        assert!((average_precision(&p, &g, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_predictions_match_once() {
        let a = rect(10, 10, 0, 0, 3, 3);
        let g = vec![vec![Instance::new(1, a.clone())]];
        let p = vec![vec![
            ScoredMask { label: 1, score: 0.9, mask: a.clone() },
            ScoredMask { label: 1, score: 0.8, mask: a },
        ]];
        assert_eq!(average_precision(&p, &g, 0.5).unwrap(), 1.0);
        let p_rev = vec![vec![
            ScoredMask { label: 1, score: 0.1, mask: rect(10, 10, 6, 6, 9, 9) },
            ScoredMask { label: 1, score: 0.8, mask: rect(10, 10, 0, 0, 3, 3) },
        ]];
        assert_eq!(average_precision(&p_rev, &g, 0.5).unwrap(), 1.0);
    }

    fn disk(r: f64, cx: f64, cy: f64) -> Mask {
        crate::synth::rasterize_disk(48, 48, cx, cy, r)
    }

    fn brute_force_boundary_f(pred: &Mask, gt: &Mask, tol: usize) -> f64 {
        let pts = |m: &Mask| m.boundary().foreground().collect::<Vec<_>>();
        let (bp, bg) = (pts(pred), pts(gt));
        let near = |p: &(usize, usize), set: &[(usize, usize)]| {
            set.iter()
                .any(|q| p.0.abs_diff(q.0).max(p.1.abs_diff(q.1)) <= tol)
        };
        let prec = bp.iter().filter(|p| near(p, &bg)).count() as f64 / bp.len() as f64;
        let rec = bg.iter().filter(|p| near(p, &bp)).count() as f64 / bg.len() as f64;
        if prec + rec == 0.0 {
            0.0
        } else {
            2.0 * prec * rec / (prec + rec)
        }
    }

    #[test]
    fn boundary_f_cases() {
        let g = disk(10.0, 24.0, 24.0);
        assert_eq!(boundary_f(&g, &g, 2).unwrap(), 1.0);
        assert_eq!(boundary_f(&g.dilate(1), &g, 2).unwrap(), 1.0);
        let shifted = g.shifted(0, 5);
        let f = boundary_f(&shifted, &g, 2).unwrap();
        assert!(f < 0.5, "{}", f);
        assert!((f - brute_force_boundary_f(&shifted, &g, 2)).abs() < 1e-12);
        assert_eq!(boundary_f(&Mask::new(4, 4), &Mask::new(4, 4), 2).unwrap(), 1.0);
        assert_eq!(boundary_f(&Mask::new(48, 48), &g, 2).unwrap(), 0.0);
    }

    #[test]
    fn boundary_f_matches_brute_force() {
        for (r, dx, dy, tol) in [(6.0, 1, 2, 0), (9.0, 3, 0, 1), (11.0, 2, 2, 2), (7.5, 0, 4, 3)] {
            let g = disk(r, 20.0, 22.0);
            let p = disk(r - 1.0, 20.0, 22.0).shifted(dy, dx);
            let f = boundary_f(&p, &g, tol).unwrap();
            assert!((f - brute_force_boundary_f(&p, &g, tol)).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluate_perfect_predictions() {
        let a = rect(10, 10, 0, 0, 3, 3);
        let g = vec![vec![Instance::new(1, a.clone())], vec![]];
        let p = vec![vec![ScoredMask { label: 1, score: 1.0, mask: a }], vec![]];
        let r = evaluate(&p, &g, &DEFAULT_THRESHOLDS, BOUNDARY_TOL).unwrap();
        assert_eq!(r.map(0.5), Some(1.0));
        assert_eq!(r.map(0.75), Some(1.0));
        assert_eq!(r.mean_iou, 1.0);
        assert_eq!(r.boundary_f, 1.0);
        assert_eq!(r.per_scene.len(), 2);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<EvalResult>(&json).unwrap(), r);
        assert!(r.to_table().contains("mAP@0.50"));
    }
}
