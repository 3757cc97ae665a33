//! Central finite-difference audit of the analytic backward pass.
//!
//! The network has ReLU gates and the IoU loss has min() branches, so a
//! probe whose `+-h` window flips any gate or branch measures a kink rather
//! than the derivative. Such probes are screened out and replaced; each
//! tensor is probed across several base points (scene, weights) until it
//! has enough clean probes.

use dplab::detector::loss::{class_targets, dense_target_loss, ltrb_iou, MIN_IOU};
use dplab::detector::{
    assign_targets, backward, forward, ArchConfig, ClassTargetKind, DenseOutput, DenseTarget, GridSpec, ModelParams,
    OutputGrad, Weights,
};
use dplab::pseudolabel::{
    build_dpl, unsupervised_cls_loss, unsupervised_reg_loss, DensePseudoLabel, PipelineConfig, Region,
};
use dplab::rng::keyed_rng;
use dplab::synthdata::{generate_scene, GenConfig, Image};
use rand::seq::SliceRandom;

pub const LOSS_NAMES: [&str; 3] = ["supervised", "unsup_qfl", "unsup_iou"];

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

struct Base {
    params: ModelParams,
    image: Image,
    target: DenseTarget,
    frozen: Vec<f64>,
    dpl: DensePseudoLabel,
    gates: Vec<bool>,
    branches: [Vec<bool>; 3],
    grads: [Vec<f64>; 3],
}

/// min() branch taken on every side of every regression pair, plus the
/// IoU clamp.
fn iou_branches(out: &DenseOutput, pairs: impl Iterator<Item = (usize, [f64; 4])>) -> Vec<bool> {
    let mut bits = Vec::new();
    for (i, t) in pairs {
        let p = out.anchor_ltrb(i);
        for k in 0..4 {
            bits.push(p[k] < t[k]);
        }
        bits.push(ltrb_iou(&p, &t) < MIN_IOU);
    }
    bits
}

fn dpl_pairs<'a>(dpl: &'a DensePseudoLabel, grid: &'a GridSpec) -> impl Iterator<Item = (usize, [f64; 4])> + 'a {
    grid.anchors().filter_map(move |a| match (dpl.region[a.index], dpl.reg_target[a.index]) {
        (Region::Learn, Some(b)) => Some((a.index, dplab::detector::assign::ltrb_to_box(&a, &b))),
        _ => None,
    })
}

fn losses(base: &Base, grid: &GridSpec, out: &DenseOutput) -> [(f64, OutputGrad, Vec<bool>); 3] {
    let (sup, g_sup) = dense_target_loss(out, &base.target, 2.0, true, Some(&base.frozen)).unwrap();
    let sup_pairs = (0..base.target.num_anchors()).filter_map(|i| base.target.reg_target[i].map(|t| (i, t)));
    let (ucls, g_ucls) = unsupervised_cls_loss(out, &base.dpl, 2.0).unwrap();
    let (ureg, g_ureg, _) = unsupervised_reg_loss(out, &base.dpl, grid).unwrap();
    [
        (sup.total(), g_sup, iou_branches(out, sup_pairs)),
        (ucls, g_ucls, Vec::new()),
        (ureg, g_ureg, iou_branches(out, dpl_pairs(&base.dpl, grid))),
    ]
}

fn make_base(arch: &ArchConfig, seed: u64) -> Base {
    let grid = arch.grid();
    let gen = GenConfig {
        height: arch.image_height,
        width: arch.image_width,
        ..GenConfig::default()
    };
    let scene = generate_scene(seed, &gen);
    let params = ModelParams::init(arch, seed.wrapping_mul(31).wrapping_add(7));
    let teacher = ModelParams::init(arch, seed.wrapping_mul(31).wrapping_add(8));
    let wts = Weights::<f64>::from_params(&params);
    let (out, cache) = forward(&wts, &scene.image).unwrap();
    let target = assign_targets(&scene.gts, &grid, ClassTargetKind::IouQuality);
    let frozen = class_targets(&out, &target);
    let (t_out, _) = forward(&Weights::<f64>::from_params(&teacher), &scene.image).unwrap();
    let pipeline = PipelineConfig {
        k_percent: 10.0,
        ..PipelineConfig::default()
    };
    let dpl = build_dpl(&t_out, &grid, &pipeline, None).unwrap();
    let mut base = Base {
        params,
        image: scene.image,
        target,
        frozen,
        dpl,
        gates: cache.gate_pattern(),
        branches: [Vec::new(), Vec::new(), Vec::new()],
        grads: [Vec::new(), Vec::new(), Vec::new()],
    };
    let ls = losses(&base, &grid, &out);
    for (k, (_, g, br)) in ls.into_iter().enumerate() {
        base.grads[k] = backward(&wts, &cache, &g).unwrap();
        base.branches[k] = br;
    }
    base
}

#[derive(Debug, Clone)]
pub struct TensorAudit {
    pub loss: &'static str,
    pub tensor: String,
    pub probes: usize,
    pub screened: usize,
    pub worst_rel: f64,
}

pub struct FdSettings {
    pub probes_per_tensor: usize,
    pub h: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Lower bound on base points; more are added so that the smallest
    /// tensor offers twice `probes_per_tensor` candidates.
    pub min_bases: usize,
    pub seed: u64,
}

/// Audit every (loss, tensor) pair. Candidates are `(base, coordinate)`
/// pairs in random order; a candidate counts for a loss when neither the
/// gate pattern nor that loss's branch pattern changes at `theta +- h`.
pub fn audit(arch: &ArchConfig, s: &FdSettings) -> Vec<TensorAudit> {
    let grid = arch.grid();
    let tensors = arch.tensors();
    let smallest = tensors.iter().map(|t| t.len()).min().unwrap_or(1);
    let n_bases = s.min_bases.max((2 * s.probes_per_tensor).div_ceil(smallest));
    let bases: Vec<Base> = (0..n_bases as u64).map(|b| make_base(arch, s.seed + b)).collect();
    let mut report = Vec::new();
    for (ti, t) in tensors.iter().enumerate() {
        let mut rng = keyed_rng(s.seed, &[0xfd, ti as u64]);
        let mut cands: Vec<(usize, usize)> = (0..bases.len()).flat_map(|b| (0..t.len()).map(move |j| (b, j))).collect();
        cands.shuffle(&mut rng);
        let mut clean = [0usize; 3];
        let mut screened = [0usize; 3];
        let mut worst = [0.0f64; 3];
        for (b, j) in cands {
            if clean.iter().all(|&c| c >= s.probes_per_tensor) {
                break;
            }
            let base = &bases[b];
            let i = t.offset + j;
            let eval = |delta: f64| {
                let mut p = base.params.clone();
                p.values[i] += delta;
                let (out, cache) = forward(&Weights::<f64>::from_params(&p), &base.image).unwrap();
                (cache.gate_pattern() == base.gates, losses(base, &grid, &out))
            };
            let (gate_p, lp) = eval(s.h);
            let (gate_m, lm) = eval(-s.h);
            for k in 0..3 {
                if clean[k] >= s.probes_per_tensor {
                    continue;
                }
                let smooth = gate_p && gate_m && lp[k].2 == base.branches[k] && lm[k].2 == base.branches[k];
                if !smooth {
                    screened[k] += 1;
                    continue;
                }
                let numeric = (lp[k].0 - lm[k].0) / (2.0 * s.h);
                worst[k] = worst[k].max(rel_err(base.grads[k][i], numeric, s.floor));
                clean[k] += 1;
            }
        }
        for k in 0..3 {
            report.push(TensorAudit {
                loss: LOSS_NAMES[k],
                tensor: t.name.clone(),
                probes: clean[k],
                screened: screened[k],
                worst_rel: worst[k],
            });
        }
    }
    report
}
