//! Box arithmetic, non-maximum suppression, detection/ground-truth matching
//! and COCO-style average precision.
//!
//! Everything here is a pure function of its inputs. Orderings are made
//! total with explicit tie-breaks so results are bit-reproducible.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixel coordinates with a class and a confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class_id: usize,
    pub score: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize, score: f64) -> Self {
        Self {
            x1,
            y1,
            x2,
            y2,
            class_id,
            score,
        }
    }

    /// Ground-truth style box: score 1.
    pub fn gt(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize) -> Self {
        Self::new(x1, y1, x2, y2, class_id, 1.0)
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self, num_classes: usize) -> bool {
        self.x2 >= self.x1
            && self.y2 >= self.y1
            && (0.0..=1.0).contains(&self.score)
            && self.class_id < num_classes
    }

    /// Shift by (dx, dy) pixels.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
            ..*self
        }
    }

    /// Clip to `[0, width] x [0, height]`.
    pub fn clipped(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
            ..*self
        }
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Total order used everywhere a list of detections is ranked:
/// score descending, then x1, y1 and class ascending.
pub fn detection_order(a: &BBox, b: &BBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.x1.total_cmp(&b.x1))
        .then(a.y1.total_cmp(&b.y1))
        .then(a.class_id.cmp(&b.class_id))
}

fn ranked_indices(dets: &[BBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // stable sort keeps input order for fully identical boxes
    order.sort_by(|&i, &j| detection_order(&dets[i], &dets[j]));
    order
}

/// Class-wise greedy NMS. A box is dropped when its IoU with an already kept
/// box of the same class exceeds `sigma_nms`. Output is in ranked order.
pub fn nms(dets: &[BBox], sigma_nms: f64) -> Vec<BBox> {
    let order = ranked_indices(dets);
    let mut kept: Vec<BBox> = Vec::with_capacity(dets.len());
    for i in order {
        let cand = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == cand.class_id && iou(k, cand) > sigma_nms);
        if !suppressed {
            kept.push(*cand);
        }
    }
    kept
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    /// (detection index, ground-truth index), in the order matches were made.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_dets: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// Greedy one-to-one matching. Detections are visited in ranked order and
/// each takes the unmatched same-class ground truth with the highest IoU,
/// provided it reaches `iou_thr`. IoU ties go to the lower gt index.
pub fn match_detections(dets: &[BBox], gts: &[BBox], iou_thr: f64) -> MatchResult {
    let mut gt_taken = vec![false; gts.len()];
    let mut det_matched = vec![false; dets.len()];
    let mut pairs = Vec::new();
    for d in ranked_indices(dets) {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_taken[g] || gt.class_id != det.class_id {
                continue;
            }
            let v = iou(det, gt);
            if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            gt_taken[g] = true;
            det_matched[d] = true;
            pairs.push((d, g));
        }
    }
    MatchResult {
        pairs,
        unmatched_dets: (0..dets.len()).filter(|&i| !det_matched[i]).collect(),
        unmatched_gts: (0..gts.len()).filter(|&i| !gt_taken[i]).collect(),
    }
}

/// False positives and false negatives after dropping detections scored
/// below `score_thr` and matching at `iou_thr`.
pub fn count_fp_fn(dets: &[BBox], gts: &[BBox], score_thr: f64, iou_thr: f64) -> (usize, usize) {
    let kept: Vec<BBox> = dets.iter().filter(|d| d.score >= score_thr).copied().collect();
    let m = match_detections(&kept, gts, iou_thr);
    (m.unmatched_dets.len(), m.unmatched_gts.len())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// IoU thresholds 0.50:0.05:0.95.
pub fn coco_iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

/// 101-point interpolated AP for one class at one IoU threshold.
/// `None` when the class has no ground truth.
pub fn class_ap(
    dets_per_image: &[Vec<BBox>],
    gts_per_image: &[Vec<BBox>],
    class_id: usize,
    iou_thr: f64,
) -> Option<f64> {
    let gts: Vec<Vec<&BBox>> = gts_per_image
        .iter()
        .map(|g| g.iter().filter(|b| b.class_id == class_id).collect())
        .collect();
    let npos: usize = gts.iter().map(Vec::len).sum();
    if npos == 0 {
        return None;
    }
    let mut dets: Vec<(usize, &BBox)> = dets_per_image
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| ds.iter().filter(|d| d.class_id == class_id).map(move |d| (img, d)))
        .collect();
    dets.sort_by(|a, b| detection_order(a.1, b.1).then(a.0.cmp(&b.0)));

    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    for (img, det) in dets {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts[img].iter().enumerate() {
            if taken[img][g] {
                continue;
            }
            let v = iou(det, gt);
            if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                taken[img][g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / npos as f64);
    }
    // precision envelope
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0)
}

/// COCO-style AP / AP50 / AP75 averaged over classes that have ground truth.
/// Returns zeros when no class has ground truth.
pub fn average_precision(dets_per_image: &[Vec<BBox>], gts_per_image: &[Vec<BBox>]) -> ApSummary {
    let num_classes = gts_per_image
        .iter()
        .flatten()
        .map(|b| b.class_id + 1)
        .max()
        .unwrap_or(0);
    let thresholds = coco_iou_thresholds();
    let mut per_thr = [0.0f64; 10];
    let mut counted = 0usize;
    for c in 0..num_classes {
        let aps: Vec<Option<f64>> = thresholds
            .iter()
            .map(|&t| class_ap(dets_per_image, gts_per_image, c, t))
            .collect();
        if aps[0].is_none() {
            continue;
        }
        counted += 1;
        for (acc, ap) in per_thr.iter_mut().zip(aps) {
            *acc += ap.unwrap_or(0.0);
        }
    }
    if counted == 0 {
        return ApSummary::default();
    }
    let per_thr: Vec<f64> = per_thr.iter().map(|v| v / counted as f64).collect();
    ApSummary {
        ap: per_thr.iter().sum::<f64>() / per_thr.len() as f64,
        ap50: per_thr[0],
        ap75: per_thr[5],
    }
}
