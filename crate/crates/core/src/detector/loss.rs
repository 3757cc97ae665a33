//! Quality focal loss, the -ln(IoU) box loss and the supervised loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::grid::{sigmoid, ClassTargetKind, DenseOutput, DenseTarget, GridSpec, OutputGrad};

/// IoU floor used by the box loss.
pub const MIN_IOU: f64 = 1e-6;

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Quality focal loss `-|y - p|^gamma * (y ln p + (1 - y) ln(1 - p))`
/// evaluated from the logit, with its derivative w.r.t. the logit.
#[inline]
pub fn qfl_with_grad(logit: f64, y: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    // binary cross-entropy in logit form
    let bce = softplus(logit) - y * logit;
    let d = p - y;
    let ad = d.abs();
    let modulator = if gamma == 0.0 { 1.0 } else { ad.powf(gamma) };
    let loss = modulator * bce;
    // d|p - y|^gamma / dp = gamma |p - y|^(gamma - 1) sign(p - y)
    let dmod_dp = if gamma == 0.0 || ad == 0.0 {
        0.0
    } else {
        gamma * ad.powf(gamma - 1.0) * d.signum()
    };
    let grad = dmod_dp * p * (1.0 - p) * bce + modulator * d;
    (loss, grad)
}

/// Quality focal loss on a probability (reference form).
pub fn qfl(p: f64, y: f64, gamma: f64) -> f64 {
    -(y - p).abs().powf(gamma) * (y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Standard (alpha-free) focal loss on a binary label.
pub fn focal_loss(p: f64, label: bool, gamma: f64) -> f64 {
    let pt = if label { p } else { 1.0 - p };
    -(1.0 - pt).powf(gamma) * pt.ln()
}

/// IoU of two boxes that share an anchor point, given as ltrb distances.
#[inline]
pub fn ltrb_iou(pred: &[f64; 4], target: &[f64; 4]) -> f64 {
    let ap = (pred[0] + pred[2]) * (pred[1] + pred[3]);
    let at = (target[0] + target[2]) * (target[1] + target[3]);
    let wi = pred[0].min(target[0]) + pred[2].min(target[2]);
    let hi = pred[1].min(target[1]) + pred[3].min(target[3]);
    let inter = wi.max(0.0) * hi.max(0.0);
    let union = ap + at - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `-ln IoU(pred, target)` and its gradient w.r.t. `pred`. The IoU is
/// clamped at [`MIN_IOU`]; the flag reports when the clamp was active.
pub fn neg_ln_iou_with_grad(pred: &[f64; 4], target: &[f64; 4]) -> (f64, [f64; 4], bool) {
    let (l, t, r, b) = (pred[0], pred[1], pred[2], pred[3]);
    let ap = (l + r) * (t + b);
    let at = (target[0] + target[2]) * (target[1] + target[3]);
    let wi = l.min(target[0]) + r.min(target[2]);
    let hi = t.min(target[1]) + b.min(target[3]);
    let inter = wi * hi;
    let union = ap + at - inter;
    let iou = if union > 0.0 && wi > 0.0 && hi > 0.0 { inter / union } else { 0.0 };
    if iou < MIN_IOU {
        return (-MIN_IOU.ln(), [0.0; 4], true);
    }
    // L = ln U - ln I
    let di = [
        if l < target[0] { hi } else { 0.0 },
        if t < target[1] { wi } else { 0.0 },
        if r < target[2] { hi } else { 0.0 },
        if b < target[3] { wi } else { 0.0 },
    ];
    let dap = [t + b, l + r, t + b, l + r];
    let mut g = [0.0; 4];
    for k in 0..4 {
        g[k] = (dap[k] - di[k]) / union - di[k] / inter;
    }
    (-(iou.ln()), g, false)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub reg: f64,
    /// Anchors whose IoU hit the clamp.
    pub clamped: usize,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.cls + self.reg
    }
}

/// Per-anchor class targets a [`DenseTarget`] implies for this output.
/// Under [`ClassTargetKind::IouQuality`] the positive slot holds
/// IoU(prediction, target box), which the loss treats as a constant.
pub fn class_targets(output: &DenseOutput, target: &DenseTarget) -> Vec<f64> {
    let mut y = target.class_target.clone();
    if target.kind == ClassTargetKind::IouQuality {
        let c = target.num_classes;
        for i in 0..target.num_anchors() {
            if let (Some(reg), Some(cls)) = (target.reg_target[i], target.matched_class[i]) {
                y[i * c + cls] = ltrb_iou(&output.anchor_ltrb(i), &reg).clamp(0.0, 1.0);
            }
        }
    }
    y
}

/// Loss of a dense output against a dense target: QFL over all
/// non-ignored anchors and classes plus `-ln IoU` at positives (when
/// `with_reg`), each divided by max(1, #positives).
///
/// `frozen_targets` overrides the class targets (used to hold the IoU
/// quality fixed when checking gradients).
pub fn dense_target_loss(
    output: &DenseOutput,
    target: &DenseTarget,
    gamma: f64,
    with_reg: bool,
    frozen_targets: Option<&[f64]>,
) -> Result<(LossParts, OutputGrad)> {
    let n = output.num_anchors();
    let c = output.num_classes;
    if target.num_anchors() != n || target.num_classes != c {
        return Err(Error::ShapeMismatch {
            what: "dense target",
            expected: format!("{n} anchors x {c} classes"),
            got: format!("{} anchors x {} classes", target.num_anchors(), target.num_classes),
        });
    }
    let owned;
    let y: &[f64] = match frozen_targets {
        Some(y) => y,
        None => {
            owned = class_targets(output, target);
            &owned
        }
    };
    let norm = (target.num_positives() as f64).max(1.0);
    let mut grad = OutputGrad::zeros(n, c);
    let mut parts = LossParts::default();
    for i in 0..n {
        if target.ignore[i] {
            continue;
        }
        for k in 0..c {
            let j = i * c + k;
            let (l, g) = qfl_with_grad(output.logits[j], y[j], gamma);
            if !l.is_finite() || !g.is_finite() {
                return Err(Error::NonFinite {
                    what: "classification loss",
                    anchor: i,
                });
            }
            parts.cls += l;
            grad.logits[j] = g / norm;
        }
        if with_reg {
            if let Some(reg) = target.reg_target[i] {
                let (l, g, clamped) = neg_ln_iou_with_grad(&output.anchor_ltrb(i), &reg);
                if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        what: "regression loss",
                        anchor: i,
                    });
                }
                parts.reg += l;
                parts.clamped += clamped as usize;
                for k in 0..4 {
                    grad.ltrb[i * 4 + k] = g[k] / norm;
                }
            }
        }
    }
    parts.cls /= norm;
    parts.reg /= norm;
    Ok((parts, grad))
}

/// Supervised detection loss: QFL with IoU-quality targets plus `-ln IoU`
/// at positives, both normalised by max(1, #positives).
pub fn supervised_loss(
    output: &DenseOutput,
    target: &DenseTarget,
    grid: &GridSpec,
    gamma: f64,
) -> Result<(LossParts, OutputGrad)> {
    output.check_grid(grid)?;
    dense_target_loss(output, target, gamma, true, None)
}
