//! FCOS-style label assignment and box decoding.

use crate::geometry::BBox;

use super::grid::{Anchor, ClassTargetKind, DenseOutput, DenseTarget, GridSpec};

/// ltrb distances from an anchor point to the sides of `b`.
pub fn ltrb_to_box(a: &Anchor, b: &BBox) -> [f64; 4] {
    [a.cx - b.x1, a.cy - b.y1, b.x2 - a.cx, b.y2 - a.cy]
}

/// Box spanned by ltrb distances around an anchor point (unclipped).
pub fn box_from_ltrb(a: &Anchor, ltrb: [f64; 4], class_id: usize, score: f64) -> BBox {
    BBox::new(a.cx - ltrb[0], a.cy - ltrb[1], a.cx + ltrb[2], a.cy + ltrb[3], class_id, score)
}

/// Whether `gt` claims `anchor`: the point lies strictly inside the box and
/// max(l, t, r, b) falls in the level's scale range.
pub fn anchor_claimed_by(grid: &GridSpec, anchor: &Anchor, gt: &BBox) -> bool {
    let d = ltrb_to_box(anchor, gt);
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let level = &grid.levels[anchor.level];
    lo > 0.0 && hi > level.lo && hi <= level.hi
}

/// Assign every anchor to at most one box. Among boxes that claim an
/// anchor the smallest-area one wins (ties: lower index). Positives carry
/// exact ltrb regression targets and a class target of 1 in the matched
/// slot; with [`ClassTargetKind::IouQuality`] the loss replaces that 1 by
/// the current prediction's IoU.
pub fn assign_targets(gts: &[BBox], grid: &GridSpec, kind: ClassTargetKind) -> DenseTarget {
    let n = grid.num_anchors();
    let c = grid.num_classes;
    let mut t = DenseTarget::negatives(n, c, kind);
    for anchor in grid.anchors() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if anchor_claimed_by(grid, &anchor, gt) {
                let area = gt.area();
                if best.is_none_or(|(_, a)| area < a) {
                    best = Some((g, area));
                }
            }
        }
        if let Some((g, _)) = best {
            let gt = &gts[g];
            let i = anchor.index;
            t.positive[i] = true;
            t.reg_target[i] = Some(ltrb_to_box(&anchor, gt));
            t.matched_class[i] = Some(gt.class_id);
            t.class_target[i * c + gt.class_id] = 1.0;
        }
    }
    t
}

/// One box per anchor whose best class reaches `score_floor`, clipped to
/// the image; listed in anchor order.
pub fn decode_boxes(output: &DenseOutput, grid: &GridSpec, score_floor: f64) -> Vec<BBox> {
    let (w, h) = (grid.image_width as f64, grid.image_height as f64);
    let mut boxes = Vec::new();
    for anchor in grid.anchors() {
        let scores = output.anchor_scores(anchor.index);
        let (cls, &score) = scores
            .iter()
            .enumerate()
            .fold((0, &scores[0]), |best, cur| if *cur.1 > *best.1 { cur } else { best });
        if score >= score_floor {
            boxes.push(box_from_ltrb(&anchor, output.anchor_ltrb(anchor.index), cls, score).clipped(w, h));
        }
    }
    boxes
}

/// Decode and keep only the box for one anchor, whatever its score.
pub fn decode_anchor(output: &DenseOutput, grid: &GridSpec, index: usize) -> BBox {
    let anchor = grid.anchor(index);
    let scores = output.anchor_scores(index);
    let (cls, &score) = scores
        .iter()
        .enumerate()
        .fold((0, &scores[0]), |best, cur| if *cur.1 > *best.1 { cur } else { best });
    box_from_ltrb(&anchor, output.anchor_ltrb(index), cls, score)
        .clipped(grid.image_width as f64, grid.image_height as f64)
}

/// Fraction of anchors that are positive for these boxes.
pub fn positive_fraction(gts: &[BBox], grid: &GridSpec) -> f64 {
    let t = assign_targets(gts, grid, ClassTargetKind::Fixed);
    t.num_positives() as f64 / t.num_anchors() as f64
}
