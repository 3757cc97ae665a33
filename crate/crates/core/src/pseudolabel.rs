//! Unlabeled-data supervision: dense pseudo-labels with top-k% region
//! selection, the pseudo-box baseline (decode, NMS, threshold, assign), the
//! unsupervised losses and the assignment-consistency diagnostic.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::assign::{assign_targets, box_from_ltrb, decode_boxes, ltrb_to_box};
use crate::detector::grid::{ClassTargetKind, DenseOutput, DenseTarget, GridSpec, OutputGrad};
use crate::detector::loss::{dense_target_loss, neg_ln_iou_with_grad, qfl_with_grad, LossParts};
use crate::error::{Error, Result};
use crate::geometry::{nms, BBox};

/// Score floor applied before NMS in the pseudo-box pipeline.
pub const DECODE_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    PseudoBox,
    Dpl,
}

/// Treatment of learning-region anchors that are not ground-truth
/// positives. `Ignore` and `Suppress` need annotations and are for
/// analysis only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardNegativeStrategy {
    Select,
    Ignore,
    Suppress,
}

impl HardNegativeStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Select => "select",
            Self::Ignore => "ignore",
            Self::Suppress => "suppress",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub mode: PipelineMode,
    pub sigma_t: f64,
    pub sigma_nms: f64,
    pub k_percent: f64,
    pub hn_strategy: HardNegativeStrategy,
    pub reg_enabled: bool,
    pub gamma: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: PipelineMode::Dpl,
            sigma_t: 0.5,
            sigma_nms: 0.6,
            k_percent: 1.0,
            hn_strategy: HardNegativeStrategy::Select,
            reg_enabled: true,
            gamma: 2.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("pipeline: {m}")));
        if !(0.0..=1.0).contains(&self.sigma_nms) {
            return bad(format!("sigma_nms {} outside [0, 1]", self.sigma_nms));
        }
        if !(0.0..=1.0).contains(&self.sigma_t) {
            return bad(format!("sigma_t {} outside [0, 1]", self.sigma_t));
        }
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return bad(format!("k_percent {} outside (0, 100]", self.k_percent));
        }
        if !(self.gamma >= 0.0) {
            return bad(format!("gamma {} is negative", self.gamma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Learn,
    Suppressed,
    Ignored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensePseudoLabel {
    pub num_classes: usize,
    /// `N x C` soft targets: teacher scores on the learning region, 0 on
    /// suppressed anchors.
    pub class_target: Vec<f64>,
    pub region: Vec<Region>,
    /// Teacher-decoded box at learning-region anchors.
    pub reg_target: Vec<Option<BBox>>,
    /// Feature richness score (max class score) per anchor.
    pub frs: Vec<f64>,
}

impl DensePseudoLabel {
    pub fn num_anchors(&self) -> usize {
        self.region.len()
    }

    pub fn count(&self, r: Region) -> usize {
        self.region.iter().filter(|&&x| x == r).count()
    }

    /// max(1, sum of FRS over learning-region anchors).
    pub fn normalizer(&self) -> f64 {
        self.region
            .iter()
            .zip(&self.frs)
            .filter(|(r, _)| **r == Region::Learn)
            .map(|(_, s)| s)
            .sum::<f64>()
            .max(1.0)
    }
}

/// Per-anchor max over classes of the teacher's post-sigmoid scores.
pub fn frs_scores(teacher: &DenseOutput) -> Vec<f64> {
    teacher
        .scores
        .chunks_exact(teacher.num_classes)
        .map(|s| s.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// `ceil(k% * n)`, at least 1 and at most `n`.
pub fn learning_region_size(n: usize, k_percent: f64) -> usize {
    // guard against k*n/100 landing a hair above an integer
    let raw = k_percent * n as f64 / 100.0;
    ((raw - 1e-9).ceil() as usize).clamp(1, n.max(1)).min(n)
}

/// Mark the top `ceil(k% * N)` anchors (pooled over all levels) as
/// learning region, the rest as suppressed. Ties go to the lower global
/// anchor index (level, then row, then column).
pub fn select_learning_region(frs: &[f64], k_percent: f64) -> Vec<Region> {
    let n = frs.len();
    let mut region = vec![Region::Suppressed; n];
    if n == 0 {
        return region;
    }
    let m = learning_region_size(n, k_percent);
    let mut order: Vec<usize> = (0..n).collect();
    let key = |a: &usize, b: &usize| frs[*b].total_cmp(&frs[*a]).then(a.cmp(b));
    if m < n {
        order.select_nth_unstable_by(m - 1, key);
    }
    for &i in &order[..m] {
        region[i] = Region::Learn;
    }
    region
}

/// Build the dense pseudo-label for one unlabeled image from the
/// teacher's output on its weak view. `gt` is required for the
/// `Ignore`/`Suppress` hard-negative strategies.
pub fn build_dpl(
    teacher: &DenseOutput,
    grid: &GridSpec,
    cfg: &PipelineConfig,
    gt: Option<&[BBox]>,
) -> Result<DensePseudoLabel> {
    teacher.check_grid(grid)?;
    let c = teacher.num_classes;
    let frs = frs_scores(teacher);
    let mut region = select_learning_region(&frs, cfg.k_percent);

    if cfg.hn_strategy != HardNegativeStrategy::Select {
        let gts = gt.ok_or(Error::MissingGroundTruth(cfg.hn_strategy.name()))?;
        let fg = assign_targets(gts, grid, ClassTargetKind::Fixed);
        let relabel = if cfg.hn_strategy == HardNegativeStrategy::Ignore {
            Region::Ignored
        } else {
            Region::Suppressed
        };
        for (r, &pos) in region.iter_mut().zip(&fg.positive) {
            if *r == Region::Learn && !pos {
                *r = relabel;
            }
        }
    }

    let mut class_target = vec![0.0; teacher.scores.len()];
    let mut reg_target = vec![None; region.len()];
    let (w, h) = (grid.image_width as f64, grid.image_height as f64);
    for anchor in grid.anchors() {
        let i = anchor.index;
        if region[i] == Region::Learn {
            class_target[i * c..(i + 1) * c].copy_from_slice(teacher.anchor_scores(i));
            reg_target[i] = Some(box_from_ltrb(&anchor, teacher.anchor_ltrb(i), 0, frs[i]).clipped(w, h));
        }
    }
    Ok(DensePseudoLabel {
        num_classes: c,
        class_target,
        region,
        reg_target,
        frs,
    })
}

/// Baseline pipeline: decode (floor 0.05), class-wise NMS at `sigma_nms`,
/// keep boxes scored at least `sigma_t`.
pub fn build_pseudo_boxes(teacher: &DenseOutput, grid: &GridSpec, cfg: &PipelineConfig) -> Vec<BBox> {
    let decoded = decode_boxes(teacher, grid, DECODE_FLOOR);
    nms(&decoded, cfg.sigma_nms)
        .into_iter()
        .filter(|b| b.score >= cfg.sigma_t)
        .collect()
}

/// Label assignment with pseudo-boxes standing in for ground truth; binary
/// class targets.
pub fn pseudo_box_to_dense(boxes: &[BBox], grid: &GridSpec) -> DenseTarget {
    assign_targets(boxes, grid, ClassTargetKind::Fixed)
}

/// QFL between student logits and the dense pseudo-label over every
/// non-ignored anchor and class, divided by [`DensePseudoLabel::normalizer`].
pub fn unsupervised_cls_loss(student: &DenseOutput, dpl: &DensePseudoLabel, gamma: f64) -> Result<(f64, OutputGrad)> {
    let n = dpl.num_anchors();
    let c = dpl.num_classes;
    if student.num_anchors() != n || student.num_classes != c {
        return Err(Error::ShapeMismatch {
            what: "student output vs pseudo-label",
            expected: format!("{n} anchors x {c} classes"),
            got: format!("{} anchors x {} classes", student.num_anchors(), student.num_classes),
        });
    }
    let norm = dpl.normalizer();
    let mut grad = OutputGrad::zeros(n, c);
    let mut loss = 0.0;
    for i in 0..n {
        if dpl.region[i] == Region::Ignored {
            continue;
        }
        for k in 0..c {
            let j = i * c + k;
            let (l, g) = qfl_with_grad(student.logits[j], dpl.class_target[j], gamma);
            if !l.is_finite() || !g.is_finite() {
                return Err(Error::NonFinite {
                    what: "unsupervised classification loss",
                    anchor: i,
                });
            }
            loss += l;
            grad.logits[j] = g / norm;
        }
    }
    Ok((loss / norm, grad))
}

/// FRS-weighted `-ln IoU` between student boxes and teacher boxes over the
/// learning region, same normaliser as the classification term. Returns
/// the number of anchors whose IoU hit the clamp.
pub fn unsupervised_reg_loss(
    student: &DenseOutput,
    dpl: &DensePseudoLabel,
    grid: &GridSpec,
) -> Result<(f64, OutputGrad, usize)> {
    student.check_grid(grid)?;
    let n = dpl.num_anchors();
    let norm = dpl.normalizer();
    let mut grad = OutputGrad::zeros(n, dpl.num_classes);
    let mut loss = 0.0;
    let mut clamped = 0;
    for anchor in grid.anchors() {
        let i = anchor.index;
        let (Region::Learn, Some(tb)) = (dpl.region[i], dpl.reg_target[i]) else {
            continue;
        };
        let target = ltrb_to_box(&anchor, &tb);
        let (l, g, c) = neg_ln_iou_with_grad(&student.anchor_ltrb(i), &target);
        if !l.is_finite() {
            return Err(Error::NonFinite {
                what: "unsupervised regression loss",
                anchor: i,
            });
        }
        let wgt = dpl.frs[i];
        loss += wgt * l;
        clamped += c as usize;
        for k in 0..4 {
            grad.ltrb[i * 4 + k] = wgt * g[k] / norm;
        }
    }
    Ok((loss / norm, grad, clamped))
}

/// Supervision derived from the teacher for one unlabeled image.
#[derive(Debug, Clone, PartialEq)]
pub enum UnsupervisedLabel {
    Dense(DensePseudoLabel),
    Boxes { boxes: Vec<BBox>, target: DenseTarget },
}

pub fn build_unsupervised_label(
    teacher: &DenseOutput,
    grid: &GridSpec,
    cfg: &PipelineConfig,
    gt: Option<&[BBox]>,
) -> Result<UnsupervisedLabel> {
    Ok(match cfg.mode {
        PipelineMode::Dpl => UnsupervisedLabel::Dense(build_dpl(teacher, grid, cfg, gt)?),
        PipelineMode::PseudoBox => {
            let boxes = build_pseudo_boxes(teacher, grid, cfg);
            let target = pseudo_box_to_dense(&boxes, grid);
            UnsupervisedLabel::Boxes { boxes, target }
        }
    })
}

/// Unsupervised loss of the student's strong-view output against a label.
/// The regression term is included only when `cfg.reg_enabled`.
pub fn unsupervised_loss(
    student: &DenseOutput,
    label: &UnsupervisedLabel,
    grid: &GridSpec,
    cfg: &PipelineConfig,
) -> Result<(LossParts, OutputGrad)> {
    match label {
        UnsupervisedLabel::Dense(dpl) => {
            let (cls, mut grad) = unsupervised_cls_loss(student, dpl, cfg.gamma)?;
            let mut parts = LossParts {
                cls,
                ..Default::default()
            };
            if cfg.reg_enabled {
                let (reg, g, clamped) = unsupervised_reg_loss(student, dpl, grid)?;
                parts.reg = reg;
                parts.clamped = clamped;
                grad.add_scaled(&g, 1.0);
            }
            Ok((parts, grad))
        }
        UnsupervisedLabel::Boxes { target, .. } => dense_target_loss(student, target, cfg.gamma, cfg.reg_enabled, None),
    }
}

/// Agreement between the positive-anchor mask assigned from pseudo-boxes
/// and the one assigned from ground truth. Metrics are `None` when
/// undefined: everything when the gt mask is empty, precision when the
/// pseudo mask is empty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyMetrics {
    pub mask_precision: Option<f64>,
    pub mask_recall: Option<f64>,
    pub mask_iou: Option<f64>,
}

pub fn assignment_consistency(gts: &[BBox], pseudo: &[BBox], grid: &GridSpec) -> ConsistencyMetrics {
    let g = assign_targets(gts, grid, ClassTargetKind::Fixed).positive;
    let p = assign_targets(pseudo, grid, ClassTargetKind::Fixed).positive;
    let n_g = g.iter().filter(|&&v| v).count();
    if n_g == 0 {
        return ConsistencyMetrics::default();
    }
    let n_p = p.iter().filter(|&&v| v).count();
    let inter = g.iter().zip(&p).filter(|(a, b)| **a && **b).count();
    let union = n_g + n_p - inter;
    ConsistencyMetrics {
        mask_precision: (n_p > 0).then(|| inter as f64 / n_p as f64),
        mask_recall: Some(inter as f64 / n_g as f64),
        mask_iou: Some(inter as f64 / union as f64),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DplSidecar {
    blob: String,
    layout: String,
    num_anchors: usize,
    num_classes: usize,
    region: Vec<Region>,
    pseudo_boxes: Option<Vec<BBox>>,
}

/// Debug dump of a label: `<name>.f32` holds class targets (`N x C`), FRS
/// (`N`) and teacher boxes (`N x 4`, NaN where absent) as little-endian
/// float32; `<name>.json` holds the regions and any pseudo-boxes.
pub fn export_label(dir: &Path, name: &str, label: &UnsupervisedLabel, grid: &GridSpec) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = grid.num_anchors();
    let (dpl, boxes) = match label {
        UnsupervisedLabel::Dense(d) => (d.clone(), None),
        UnsupervisedLabel::Boxes { boxes, target } => (
            DensePseudoLabel {
                num_classes: target.num_classes,
                class_target: target.class_target.clone(),
                region: target
                    .positive
                    .iter()
                    .map(|&p| if p { Region::Learn } else { Region::Suppressed })
                    .collect(),
                reg_target: grid
                    .anchors()
                    .map(|a| target.reg_target[a.index].map(|r| box_from_ltrb(&a, r, 0, 1.0)))
                    .collect(),
                frs: vec![f64::NAN; n],
            },
            Some(boxes.clone()),
        ),
    };
    let mut bytes = Vec::new();
    let push = |bytes: &mut Vec<u8>, v: f64| bytes.extend_from_slice(&(v as f32).to_le_bytes());
    dpl.class_target.iter().for_each(|&v| push(&mut bytes, v));
    dpl.frs.iter().for_each(|&v| push(&mut bytes, v));
    for b in &dpl.reg_target {
        let v = b.map(|b| [b.x1, b.y1, b.x2, b.y2]).unwrap_or([f64::NAN; 4]);
        v.iter().for_each(|&x| push(&mut bytes, x));
    }
    let blob = format!("{name}.f32");
    let blob_path = dir.join(&blob);
    fs::write(&blob_path, bytes).map_err(|e| Error::io(&blob_path, e))?;
    let side = DplSidecar {
        blob,
        layout: "class_target[N*C], frs[N], teacher_box[N*4]".into(),
        num_anchors: n,
        num_classes: dpl.num_classes,
        region: dpl.region,
        pseudo_boxes: boxes,
    };
    let json_path = dir.join(format!("{name}.json"));
    let text = serde_json::to_string_pretty(&side).map_err(|e| Error::json("label sidecar", e))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::new(128, 128, 3)
    }

    fn const_output(logit: f64) -> DenseOutput {
        let n = grid().num_anchors();
        DenseOutput::from_logits(3, vec![logit; n * 3], vec![8.0; n * 4])
    }

    #[test]
    fn frs_examples() {
        let out = DenseOutput::from_logits(3, vec![0.0; 6], vec![1.0; 8]);
        assert_eq!(frs_scores(&out), vec![0.5, 0.5]);
        let mut out = out;
        out.scores = vec![0.1, 0.7, 0.2, 0.3, 0.3, 0.3];
        assert_eq!(frs_scores(&out), vec![0.7, 0.3]);
    }

    #[test]
    fn region_sizes() {
        assert_eq!(learning_region_size(320, 1.0), 4);
        assert_eq!(learning_region_size(320, 0.1), 1);
        assert_eq!(learning_region_size(320, 5.0), 16);
        assert_eq!(learning_region_size(320, 100.0), 320);
        let frs = vec![0.5; 320];
        let r = select_learning_region(&frs, 1.0);
        // all tied: lowest indices win
        assert_eq!(learn_positions(&r), vec![0, 1, 2, 3]);
        assert!(select_learning_region(&frs, 100.0).iter().all(|&x| x == Region::Learn));
    }

    fn learn_positions(r: &[Region]) -> Vec<usize> {
        (0..r.len()).filter(|&i| r[i] == Region::Learn).collect()
    }

    #[test]
    fn dpl_full_region_copies_teacher() {
        let g = grid();
        let teacher = const_output(-1.0);
        let cfg = PipelineConfig {
            k_percent: 100.0,
            ..Default::default()
        };
        let dpl = build_dpl(&teacher, &g, &cfg, None).unwrap();
        assert_eq!(dpl.class_target, teacher.scores);
        assert_eq!(dpl.count(Region::Learn), 320);
        // self-consistency: the teacher as student has zero loss
        let (l, grad) = unsupervised_cls_loss(&teacher, &dpl, 2.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(grad.logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_peak_gives_single_nonzero_anchor() {
        let g = grid();
        let mut teacher = const_output(-50.0);
        teacher.scores.iter_mut().for_each(|s| *s = 0.0);
        teacher.scores[17 * 3 + 2] = 0.8;
        let cfg = PipelineConfig {
            k_percent: 0.1,
            ..Default::default()
        };
        let dpl = build_dpl(&teacher, &g, &cfg, None).unwrap();
        let nonzero: Vec<usize> = (0..320)
            .filter(|&i| dpl.class_target[i * 3..i * 3 + 3].iter().any(|&v| v != 0.0))
            .collect();
        assert_eq!(nonzero, vec![17]);
    }

    #[test]
    fn ignore_and_suppress_need_ground_truth() {
        let g = grid();
        for hn in [HardNegativeStrategy::Ignore, HardNegativeStrategy::Suppress] {
            let cfg = PipelineConfig {
                hn_strategy: hn,
                ..Default::default()
            };
            assert!(matches!(
                build_dpl(&const_output(0.0), &g, &cfg, None),
                Err(Error::MissingGroundTruth(_))
            ));
        }
    }

    #[test]
    fn cls_loss_scalar_example_and_ignore_mask() {
        let n = 2;
        let student = DenseOutput::from_logits(1, vec![0.0, 0.3], vec![1.0; n * 4]);
        let mut dpl = DensePseudoLabel {
            num_classes: 1,
            class_target: vec![1.0, 0.0],
            region: vec![Region::Learn, Region::Suppressed],
            reg_target: vec![None; n],
            frs: vec![1.0, 0.0],
        };
        let (l0, g0) = unsupervised_cls_loss(&student, &dpl, 2.0).unwrap();
        let (expected, _) = qfl_with_grad(0.3, 0.0, 2.0);
        assert!((l0 - (0.25 * 2f64.ln() + expected)).abs() < 1e-12);
        assert!(g0.logits[1] != 0.0);
        dpl.region[1] = Region::Ignored;
        let (l1, g1) = unsupervised_cls_loss(&student, &dpl, 2.0).unwrap();
        assert!((l1 - 0.25 * 2f64.ln()).abs() < 1e-15);
        assert_eq!(g1.logits[1], 0.0);
    }

    #[test]
    fn reg_loss_examples() {
        let g = grid();
        let mut teacher = const_output(-3.0);
        let centre = 4 * 16 + 4; // anchor at (36, 36)
        teacher.scores[centre * 3] = 0.9;
        let cfg = PipelineConfig {
            k_percent: 100.0 / 320.0,
            ..Default::default()
        };
        let dpl = build_dpl(&teacher, &g, &cfg, None).unwrap();
        assert_eq!(dpl.count(Region::Learn), 1);
        assert_eq!(dpl.reg_target[centre], Some(BBox::new(28.0, 28.0, 44.0, 44.0, 0, 0.9)));
        let (l, _, _) = unsupervised_reg_loss(&teacher, &dpl, &g).unwrap();
        assert_eq!(l, 0.0);

        // unit weight, IoU e^-1 -> loss 1; shrink the box to side s: IoU = s^2/256
        let mut dpl = dpl;
        dpl.frs[centre] = 1.0;
        let side = 16.0 * (-0.5f64).exp();
        let mut student = teacher.clone();
        student.ltrb[centre * 4..centre * 4 + 4].fill(side / 2.0);
        let (l, _, _) = unsupervised_reg_loss(&student, &dpl, &g).unwrap();
        assert!((l - 1.0).abs() < 1e-12, "{l}");
    }

    #[test]
    fn pseudo_boxes_thresholding() {
        let g = grid();
        let mut teacher = const_output(-10.0);
        let cfg = PipelineConfig {
            mode: PipelineMode::PseudoBox,
            sigma_t: 1.01,
            ..Default::default()
        };
        assert!(build_pseudo_boxes(&teacher, &g, &cfg).is_empty());
        teacher.scores[40 * 3] = 0.9;
        let cfg = PipelineConfig { sigma_t: 0.5, ..cfg };
        assert_eq!(build_pseudo_boxes(&teacher, &g, &cfg).len(), 1);
    }

    #[test]
    fn consistency_conventions() {
        let g = grid();
        let gt = [BBox::gt(20.0, 20.0, 60.0, 60.0, 0)];
        let m = assignment_consistency(&gt, &gt, &g);
        assert_eq!((m.mask_precision, m.mask_recall, m.mask_iou), (Some(1.0), Some(1.0), Some(1.0)));
        let m = assignment_consistency(&gt, &[], &g);
        assert_eq!((m.mask_precision, m.mask_recall, m.mask_iou), (None, Some(0.0), Some(0.0)));
        let m = assignment_consistency(&[], &gt, &g);
        assert_eq!(m, ConsistencyMetrics::default());
    }

    #[test]
    fn label_dump_writes_both_files() {
        let g = grid();
        let dir = tempfile::tempdir().unwrap();
        let dpl = build_dpl(&const_output(0.0), &g, &PipelineConfig::default(), None).unwrap();
        export_label(dir.path(), "dpl", &UnsupervisedLabel::Dense(dpl), &g).unwrap();
        let bytes = std::fs::read(dir.path().join("dpl.f32")).unwrap();
        assert_eq!(bytes.len(), 4 * 320 * (3 + 1 + 4));
        assert!(dir.path().join("dpl.json").exists());
    }
}
