//! Brute-force reference implementations and random instance generators.

use std::cmp::Ordering;

use dplab::detector::GridSpec;
use dplab::geometry::BBox;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// IoU from explicit overlap intervals.
pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let overlap = |a0: f64, a1: f64, b0: f64, b1: f64| {
        let lo = if a0 > b0 { a0 } else { b0 };
        let hi = if a1 < b1 { a1 } else { b1 };
        if hi > lo {
            hi - lo
        } else {
            0.0
        }
    };
    let inter = overlap(a.x1, a.x2, b.x1, b.x2) * overlap(a.y1, a.y2, b.y1, b.y2);
    let ua = (a.x2 - a.x1) * (a.y2 - a.y1);
    let ub = (b.x2 - b.x1) * (b.y2 - b.y1);
    let union = ua + ub - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

fn rank_key(a: &(usize, BBox), b: &(usize, BBox)) -> Ordering {
    let (ia, da) = a;
    let (ib, db) = b;
    db.score
        .partial_cmp(&da.score)
        .unwrap()
        .then(da.x1.partial_cmp(&db.x1).unwrap())
        .then(da.y1.partial_cmp(&db.y1).unwrap())
        .then(da.class_id.cmp(&db.class_id))
        .then(ia.cmp(ib))
}

/// Per-class NMS by repeated extraction of the best remaining box.
pub fn nms_ref(dets: &[BBox], thr: f64) -> Vec<BBox> {
    let mut kept: Vec<(usize, BBox)> = Vec::new();
    let classes: std::collections::BTreeSet<usize> = dets.iter().map(|d| d.class_id).collect();
    for c in classes {
        let mut pool: Vec<(usize, BBox)> = dets.iter().copied().enumerate().filter(|(_, d)| d.class_id == c).collect();
        while !pool.is_empty() {
            let best_pos = (0..pool.len())
                .min_by(|&i, &j| rank_key(&pool[i], &pool[j]))
                .unwrap();
            let best = pool.remove(best_pos);
            pool.retain(|(_, d)| !(iou_ref(&best.1, d) > thr));
            kept.push(best);
        }
    }
    kept.sort_by(rank_key);
    kept.into_iter().map(|(_, d)| d).collect()
}

/// Dense assignment by scanning boxes for each anchor position computed
/// from the level strides.
pub struct AssignRef {
    pub positive: Vec<bool>,
    pub matched: Vec<Option<usize>>,
    pub reg: Vec<Option<[f64; 4]>>,
}

pub fn assign_ref(gts: &[BBox], grid: &GridSpec) -> AssignRef {
    let mut out = AssignRef {
        positive: Vec::new(),
        matched: Vec::new(),
        reg: Vec::new(),
    };
    for level in &grid.levels {
        for row in 0..level.height {
            for col in 0..level.width {
                let s = level.stride as f64;
                let (cx, cy) = (s * col as f64 + s / 2.0, s * row as f64 + s / 2.0);
                let mut winner: Option<usize> = None;
                for (g, b) in gts.iter().enumerate() {
                    let d = [cx - b.x1, cy - b.y1, b.x2 - cx, b.y2 - cy];
                    let inside = d.iter().all(|&v| v > 0.0);
                    let m = d[0].max(d[1]).max(d[2]).max(d[3]);
                    if !(inside && m > level.lo && m <= level.hi) {
                        continue;
                    }
                    winner = match winner {
                        Some(w) if gts[w].area() <= b.area() => Some(w),
                        _ => Some(g),
                    };
                }
                out.positive.push(winner.is_some());
                out.matched.push(winner.map(|g| gts[g].class_id));
                out.reg.push(winner.map(|g| {
                    let b = &gts[g];
                    [cx - b.x1, cy - b.y1, b.x2 - cx, b.y2 - cy]
                }));
            }
        }
    }
    out
}

/// Learning-region membership by a full sort; `k_permille` is k% times 10
/// so the region size is exact integer arithmetic.
pub fn top_k_ref(scores: &[f64], k_permille: usize) -> Vec<bool> {
    let n = scores.len();
    let m = (k_permille * n).div_ceil(1000).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut member = vec![false; n];
    for &i in &idx[..m] {
        member[i] = true;
    }
    member
}

/// FP/FN by greedy matching in rank order over a precomputed IoU matrix.
pub fn fp_fn_ref(dets: &[BBox], gts: &[BBox], score_thr: f64, iou_thr: f64) -> (usize, usize) {
    let mut kept: Vec<(usize, BBox)> = dets.iter().copied().enumerate().filter(|(_, d)| d.score >= score_thr).collect();
    kept.sort_by(rank_key);
    let m: Vec<Vec<f64>> = kept.iter().map(|(_, d)| gts.iter().map(|g| iou_ref(d, g)).collect()).collect();
    let mut taken = vec![false; gts.len()];
    let mut tp = 0;
    for (r, (_, d)) in kept.iter().enumerate() {
        let mut best: Option<usize> = None;
        for g in 0..gts.len() {
            if taken[g] || gts[g].class_id != d.class_id || m[r][g] < iou_thr {
                continue;
            }
            if best.is_none_or(|b| m[r][g] > m[r][b]) {
                best = Some(g);
            }
        }
        if let Some(g) = best {
            taken[g] = true;
            tp += 1;
        }
    }
    (kept.len() - tp, gts.len() - tp)
}

/// Random box inside a `size` square. With `lattice` the corners are
/// multiples of 0.5, so IoU ties and exact thresholds occur often.
pub fn random_box(rng: &mut ChaCha8Rng, size: f64, classes: usize, lattice: bool) -> BBox {
    let mut coord = |hi: f64| {
        let v = rng.random_range(0.0..hi);
        if lattice {
            (v * 2.0).floor() / 2.0
        } else {
            v
        }
    };
    let x1 = coord(size - 4.0);
    let y1 = coord(size - 4.0);
    let w = coord(size - x1 - 0.5).max(0.5);
    let h = coord(size - y1 - 0.5).max(0.5);
    let class_id = rng.random_range(0..classes);
    let score = if lattice {
        rng.random_range(0..5) as f64 / 4.0
    } else {
        rng.random::<f64>()
    };
    BBox::new(x1, y1, x1 + w, y1 + h, class_id, score)
}

/// A detection near `gt`: jittered corners and a random score.
pub fn near_box(rng: &mut ChaCha8Rng, gt: &BBox, jitter: f64) -> BBox {
    let mut j = || rng.random_range(-jitter..=jitter);
    let (x1, y1) = (gt.x1 + j(), gt.y1 + j());
    let (x2, y2) = ((gt.x2 + j()).max(x1 + 0.5), (gt.y2 + j()).max(y1 + 0.5));
    let score = rng.random::<f64>();
    BBox::new(x1, y1, x2, y2, gt.class_id, score)
}

/// Outcome of comparing an implementation with its oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleRun {
    pub instances: usize,
    pub mismatches: usize,
    /// First failing instance, if any.
    pub first_failure: Option<usize>,
}

fn tally(instances: usize, mut same: impl FnMut(usize) -> bool) -> OracleRun {
    let mut run = OracleRun {
        instances,
        mismatches: 0,
        first_failure: None,
    };
    for i in 0..instances {
        if !same(i) {
            run.mismatches += 1;
            run.first_failure.get_or_insert(i);
        }
    }
    run
}

fn rng(seed: u64, i: usize) -> ChaCha8Rng {
    dplab::rng::keyed_rng(seed, &[i as u64])
}

pub fn check_nms(instances: usize, seed: u64) -> OracleRun {
    tally(instances, |i| {
        let mut r = rng(seed, i);
        let lattice = i % 2 == 0;
        let n = r.random_range(0..40);
        let size = if lattice { 16.0 } else { 64.0 };
        let dets: Vec<BBox> = (0..n).map(|_| random_box(&mut r, size, 3, lattice)).collect();
        let thr = [0.0, 0.3, 0.5, 0.6, 0.7, 1.0][r.random_range(0..6)];
        dplab::geometry::nms(&dets, thr) == nms_ref(&dets, thr)
    })
}

pub fn check_assignment(instances: usize, seed: u64) -> OracleRun {
    tally(instances, |i| {
        let mut r = rng(seed, i);
        let (h, w) = [(128, 128), (64, 96), (32, 32)][i % 3];
        let grid = GridSpec::new(h, w, 3);
        let n = r.random_range(0..8);
        let gts: Vec<BBox> = (0..n)
            .map(|_| {
                // whole-pixel boxes land exactly on anchor centres and range edges
                let mut b = random_box(&mut r, h.min(w) as f64 + 4.0, 3, i % 2 == 0);
                b.score = 1.0;
                b
            })
            .collect();
        let t = dplab::detector::assign_targets(&gts, &grid, dplab::detector::ClassTargetKind::Fixed);
        let o = assign_ref(&gts, &grid);
        let classes_ok = (0..t.num_anchors()).all(|a| {
            (0..3).all(|c| t.class_target[a * 3 + c] == if o.matched[a] == Some(c) { 1.0 } else { 0.0 })
        });
        t.positive == o.positive && t.matched_class == o.matched && t.reg_target == o.reg && classes_ok
    })
}

pub fn check_top_k(instances: usize, seed: u64) -> OracleRun {
    use dplab::pseudolabel::{select_learning_region, Region};
    tally(instances, |i| {
        let mut r = rng(seed, i);
        let n = r.random_range(1..3000);
        let levels = [2, 5, 1000][i % 3];
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
        let k_permille = r.random_range(1..=1000);
        let got = select_learning_region(&scores, k_permille as f64 / 10.0);
        let want = top_k_ref(&scores, k_permille);
        got.iter().zip(&want).all(|(g, w)| (*g == Region::Learn) == *w)
    })
}

pub fn check_fp_fn(instances: usize, seed: u64) -> OracleRun {
    tally(instances, |i| {
        let mut r = rng(seed, i);
        let lattice = i % 2 == 0;
        let gts: Vec<BBox> = (0..r.random_range(0..8)).map(|_| random_box(&mut r, 64.0, 3, lattice)).collect();
        let mut dets: Vec<BBox> = gts.iter().map(|g| near_box(&mut r, g, 4.0)).collect();
        let extra = r.random_range(0..10);
        dets.extend((0..extra).map(|_| random_box(&mut r, 64.0, 3, lattice)));
        let st = [0.0, 0.25, 0.5, 0.75, r.random::<f64>()][r.random_range(0..5)];
        let it = [0.5, 0.75, r.random::<f64>()][r.random_range(0..3)];
        dplab::geometry::count_fp_fn(&dets, &gts, st, it) == fp_fn_ref(&dets, &gts, st, it)
    })
}
