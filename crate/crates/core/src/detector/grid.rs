//! Anchor grids and the dense per-anchor containers.
//!
//! Anchors are indexed globally: level-major, then row, then column. All
//! dense arrays in this crate use that order, so anchor `i` of a weak view
//! and anchor `i` of its strong view cover the same image region.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// Scale range `(lo, hi]` on max(l, t, r, b) for positives.
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub image_height: usize,
    pub image_width: usize,
    pub num_classes: usize,
    pub levels: Vec<LevelSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub index: usize,
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub stride: usize,
    pub cx: f64,
    pub cy: f64,
}

impl GridSpec {
    /// Two levels at strides 8 and 16 with ranges (0, 64] and (64, inf).
    pub fn new(image_height: usize, image_width: usize, num_classes: usize) -> Self {
        let level = |stride: usize, lo: f64, hi: f64| LevelSpec {
            stride,
            height: image_height / stride,
            width: image_width / stride,
            lo,
            hi,
        };
        Self {
            image_height,
            image_width,
            num_classes,
            levels: vec![level(8, 0.0, 64.0), level(16, 64.0, f64::INFINITY)],
        }
    }

    pub fn level_len(&self, level: usize) -> usize {
        self.levels[level].height * self.levels[level].width
    }

    /// First global anchor index of `level`.
    pub fn level_offset(&self, level: usize) -> usize {
        (0..level).map(|l| self.level_len(l)).sum()
    }

    pub fn num_anchors(&self) -> usize {
        (0..self.levels.len()).map(|l| self.level_len(l)).sum()
    }

    pub fn anchor(&self, index: usize) -> Anchor {
        let mut rest = index;
        for (level, spec) in self.levels.iter().enumerate() {
            let len = spec.height * spec.width;
            if rest < len {
                let (row, col) = (rest / spec.width, rest % spec.width);
                return Anchor {
                    index,
                    level,
                    row,
                    col,
                    stride: spec.stride,
                    cx: (col as f64 + 0.5) * spec.stride as f64,
                    cy: (row as f64 + 0.5) * spec.stride as f64,
                };
            }
            rest -= len;
        }
        panic!("anchor index {index} out of range");
    }

    pub fn anchors(&self) -> impl Iterator<Item = Anchor> + '_ {
        (0..self.num_anchors()).map(|i| self.anchor(i))
    }
}

/// Post-sigmoid class scores and ltrb distances for every anchor, plus the
/// logits they came from (losses use the logits for stable log terms).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOutput {
    pub num_classes: usize,
    /// `N x C`, anchor-major.
    pub logits: Vec<f64>,
    /// `N x C`, sigmoid of `logits`.
    pub scores: Vec<f64>,
    /// `N x 4` distances (left, top, right, bottom) in pixels.
    pub ltrb: Vec<f64>,
}

impl DenseOutput {
    pub fn num_anchors(&self) -> usize {
        self.ltrb.len() / 4
    }

    pub fn from_logits(num_classes: usize, logits: Vec<f64>, ltrb: Vec<f64>) -> Self {
        let scores = logits.iter().map(|&x| sigmoid(x)).collect();
        Self {
            num_classes,
            logits,
            scores,
            ltrb,
        }
    }

    pub fn anchor_scores(&self, i: usize) -> &[f64] {
        &self.scores[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn anchor_ltrb(&self, i: usize) -> [f64; 4] {
        let s = &self.ltrb[i * 4..i * 4 + 4];
        [s[0], s[1], s[2], s[3]]
    }

    pub fn check_grid(&self, grid: &GridSpec) -> Result<()> {
        let n = grid.num_anchors();
        if self.num_classes != grid.num_classes || self.ltrb.len() != n * 4 || self.scores.len() != n * self.num_classes
        {
            return Err(Error::ShapeMismatch {
                what: "dense output",
                expected: format!("{n} anchors x {} classes", grid.num_classes),
                got: format!("{} anchors x {} classes", self.num_anchors(), self.num_classes),
            });
        }
        Ok(())
    }
}

/// Gradient of a scalar loss with respect to a [`DenseOutput`]: class
/// logits (pre-sigmoid scores) and ltrb distances.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad {
    pub logits: Vec<f64>,
    pub ltrb: Vec<f64>,
}

impl OutputGrad {
    pub fn zeros(num_anchors: usize, num_classes: usize) -> Self {
        Self {
            logits: vec![0.0; num_anchors * num_classes],
            ltrb: vec![0.0; num_anchors * 4],
        }
    }

    pub fn add_scaled(&mut self, other: &OutputGrad, scale: f64) {
        for (a, b) in self.logits.iter_mut().zip(&other.logits) {
            *a += scale * b;
        }
        for (a, b) in self.ltrb.iter_mut().zip(&other.ltrb) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.logits.iter_mut().chain(self.ltrb.iter_mut()).for_each(|v| *v *= s);
    }
}

/// How positive-anchor class targets are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassTargetKind {
    /// IoU between the decoded prediction and the matched box, recomputed
    /// from the current prediction.
    IouQuality,
    /// Use `class_target` as stored (binary 1 for assigned positives).
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTarget {
    pub num_classes: usize,
    pub kind: ClassTargetKind,
    /// `N x C` targets in [0, 1].
    pub class_target: Vec<f64>,
    /// Exact ltrb distances to the assigned box, present at positives.
    pub reg_target: Vec<Option<[f64; 4]>>,
    pub matched_class: Vec<Option<usize>>,
    pub positive: Vec<bool>,
    pub ignore: Vec<bool>,
}

impl DenseTarget {
    pub fn negatives(num_anchors: usize, num_classes: usize, kind: ClassTargetKind) -> Self {
        Self {
            num_classes,
            kind,
            class_target: vec![0.0; num_anchors * num_classes],
            reg_target: vec![None; num_anchors],
            matched_class: vec![None; num_anchors],
            positive: vec![false; num_anchors],
            ignore: vec![false; num_anchors],
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.positive.len()
    }

    pub fn num_positives(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
