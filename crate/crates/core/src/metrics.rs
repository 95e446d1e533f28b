//! Lane metrics: point accuracy with an angle-dependent tolerance, lane-level
//! FP/FN rates, and F1 over IoU-matched lane strokes.

use crate::data::LanePoints;
use crate::error::{Error, Result};
use crate::labels::ClassMap;

/// Accuracy below which a predicted lane counts as mispredicted.
pub const LANE_ACCURACY_THRESHOLD: f64 = 0.85;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
/// Extracted lanes with fewer points are dropped.
pub const MIN_LANE_POINTS: usize = 3;

/// Point tolerance at 800 px width.
pub const BASE_THRESHOLD_800: f64 = 20.0;

pub fn scaled_base(width: usize) -> f64 {
    BASE_THRESHOLD_800 * width as f64 / 800.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsConfig {
    pub base: f64,
    pub iou_threshold: f64,
    /// Stroke width (image pixels) used to rasterize lanes for IoU.
    pub stroke_width: usize,
}

impl MetricsConfig {
    pub fn for_width(width: usize) -> Self {
        Self {
            base: scaled_base(width),
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            stroke_width: 4,
        }
    }
}

/// Per class `c` (entry `c - 1`), the mean column of every row holding class
/// `c`, bottom to top, after nearest upsampling by `factor`. Lanes with fewer
/// than [`MIN_LANE_POINTS`] points come back empty.
pub fn extract_lanes(prediction: &ClassMap, factor: usize) -> Vec<LanePoints> {
    let map = if factor > 1 { prediction.upsample(factor) } else { prediction.clone() };
    let (h, w) = (map.height(), map.width());
    (1..=map.num_lanes())
        .map(|c| {
            let mut pts = Vec::new();
            for y in (0..h).rev() {
                let (mut sum, mut n) = (0usize, 0usize);
                for x in 0..w {
                    if map.at(y, x) as usize == c {
                        sum += x;
                        n += 1;
                    }
                }
                if n > 0 {
                    pts.push((sum as f64 / n as f64, y as f64));
                }
            }
            if pts.len() < MIN_LANE_POINTS {
                pts.clear();
            }
            pts
        })
        .collect()
}

/// `dx/dy` at every point: central differences inside, one-sided at the ends.
pub fn lane_slopes(lane: &[(f64, f64)]) -> Vec<f64> {
    let n = lane.len();
    let diff = |a: usize, b: usize| {
        let dy = lane[b].1 - lane[a].1;
        if dy == 0.0 { 0.0 } else { (lane[b].0 - lane[a].0) / dy }
    };
    (0..n)
        .map(|i| match n {
            0 | 1 => 0.0,
            _ if i == 0 => diff(0, 1),
            _ if i == n - 1 => diff(n - 2, n - 1),
            _ => diff(i - 1, i + 1),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaneEvalResult {
    pub accuracy: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    /// Accuracy of every ground-truth lane that has points, in class order.
    pub per_lane: Vec<f64>,
    pub correct_points: usize,
    pub total_points: usize,
    /// Mispredicted predicted lanes.
    pub l_f: usize,
    /// Predicted lanes.
    pub l_p: usize,
    /// Ground-truth lanes without an accurate prediction.
    pub l_m: usize,
    /// Ground-truth lanes.
    pub l_y: usize,
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 { 0.0 } else { n as f64 / d as f64 }
}

/// Lanes are matched by class (list index). A ground-truth point is correct
/// when the predicted lane has a point on the same row closer than
/// `base / cos(angle)` horizontally.
pub fn point_accuracy(pred: &[LanePoints], gt: &[LanePoints], base: f64) -> Result<LaneEvalResult> {
    let mut per_lane = Vec::new();
    let (mut correct, mut total) = (0, 0);
    let (mut l_f, mut l_p, mut l_m, mut l_y) = (0, 0, 0, 0);
    for c in 0..pred.len().max(gt.len()) {
        let p = pred.get(c).map_or(&[][..], |v| &v[..]);
        let g = gt.get(c).map_or(&[][..], |v| &v[..]);
        let lane_acc = if g.is_empty() {
            None
        } else {
            let slopes = lane_slopes(g);
            let hits = g
                .iter()
                .zip(&slopes)
                .filter(|&(&(gx, gy), &s)| {
                    let tol = base * (1.0 + s * s).sqrt();
                    p.iter().any(|&(px, py)| py == gy && (px - gx).abs() < tol)
                })
                .count();
            correct += hits;
            total += g.len();
            let acc = hits as f64 / g.len() as f64;
            per_lane.push(acc);
            Some(acc)
        };
        let accurate = lane_acc.is_some_and(|a| a >= LANE_ACCURACY_THRESHOLD);
        if !g.is_empty() {
            l_y += 1;
            if p.is_empty() || !accurate {
                l_m += 1;
            }
        }
        if !p.is_empty() {
            l_p += 1;
            if !accurate {
                l_f += 1;
            }
        }
    }
    if l_y == 0 {
        return Err(Error::NoGroundTruth);
    }
    Ok(LaneEvalResult {
        accuracy: ratio(correct, total),
        fp_rate: ratio(l_f, l_p),
        fn_rate: ratio(l_m, l_y),
        per_lane,
        correct_points: correct,
        total_points: total,
        l_f,
        l_p,
        l_m,
        l_y,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F1Result {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl F1Result {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Pixels whose centre lies within `stroke / 2` of the lane polyline.
pub fn rasterize_lane(lane: &[(f64, f64)], height: usize, width: usize, stroke: usize) -> Vec<bool> {
    let mut mask = vec![false; height * width];
    if lane.is_empty() {
        return mask;
    }
    let r = stroke as f64 / 2.0;
    let segments: Vec<((f64, f64), (f64, f64))> = if lane.len() == 1 {
        vec![(lane[0], lane[0])]
    } else {
        lane.windows(2).map(|s| (s[0], s[1])).collect()
    };
    for (a, b) in segments {
        let x0 = (a.0.min(b.0) - r).floor().max(0.0) as usize;
        let x1 = ((a.0.max(b.0) + r).ceil().max(0.0) as usize).min(width - 1);
        let y0 = (a.1.min(b.1) - r).floor().max(0.0) as usize;
        let y1 = ((a.1.max(b.1) + r).ceil().max(0.0) as usize).min(height - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if segment_distance((x as f64, y as f64), a, b) <= r {
                    mask[y * width + x] = true;
                }
            }
        }
    }
    mask
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    ratio(inter, union)
}

/// IoU of every (predicted, ground-truth) pair of non-empty lanes.
pub fn iou_matrix(pred: &[LanePoints], gt: &[LanePoints], height: usize, width: usize, stroke: usize) -> Vec<Vec<f64>> {
    let raster = |lanes: &[LanePoints]| -> Vec<Vec<bool>> {
        lanes
            .iter()
            .filter(|l| !l.is_empty())
            .map(|l| rasterize_lane(l, height, width, stroke))
            .collect()
    };
    let (p, g) = (raster(pred), raster(gt));
    p.iter().map(|pm| g.iter().map(|gm| mask_iou(pm, gm)).collect()).collect()
}

/// Greedy one-to-one matching by descending IoU; returns the matched pairs.
pub fn greedy_match(iou: &[Vec<f64>], threshold: f64) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize, f64)> = iou
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, &v)| (i, j, v)))
        .filter(|&(_, _, v)| v >= threshold)
        .collect();
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let (mut used_p, mut used_g) = (vec![false; iou.len()], vec![false; iou.first().map_or(0, Vec::len)]);
    let mut out = Vec::new();
    for (i, j, _) in pairs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            out.push((i, j));
        }
    }
    out
}

pub fn f1_score(
    pred: &[LanePoints],
    gt: &[LanePoints],
    height: usize,
    width: usize,
    stroke: usize,
    iou_threshold: f64,
) -> F1Result {
    let n_pred = pred.iter().filter(|l| !l.is_empty()).count();
    let n_gt = gt.iter().filter(|l| !l.is_empty()).count();
    let iou = iou_matrix(pred, gt, height, width, stroke);
    let tp = greedy_match(&iou, iou_threshold).len();
    F1Result::from_counts(tp, n_pred - tp, n_gt - tp)
}

/// Metrics of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEval {
    pub lanes: LaneEvalResult,
    pub f1: F1Result,
}

pub fn evaluate_image(pred: &[LanePoints], gt: &[LanePoints], height: usize, width: usize, cfg: &MetricsConfig) -> Result<ImageEval> {
    Ok(ImageEval {
        lanes: point_accuracy(pred, gt, cfg.base)?,
        f1: f1_score(pred, gt, height, width, cfg.stroke_width, cfg.iou_threshold),
    })
}

/// Dataset totals: point and lane counts are pooled before taking ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub images: usize,
    pub accuracy: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub f1: F1Result,
}

pub fn summarize(images: &[ImageEval]) -> EvalSummary {
    let sum = |f: &dyn Fn(&ImageEval) -> usize| images.iter().map(f).sum::<usize>();
    EvalSummary {
        images: images.len(),
        accuracy: ratio(sum(&|e| e.lanes.correct_points), sum(&|e| e.lanes.total_points)),
        fp_rate: ratio(sum(&|e| e.lanes.l_f), sum(&|e| e.lanes.l_p)),
        fn_rate: ratio(sum(&|e| e.lanes.l_m), sum(&|e| e.lanes.l_y)),
        f1: F1Result::from_counts(sum(&|e| e.f1.tp), sum(&|e| e.f1.fp), sum(&|e| e.f1.fn_)),
    }
}
