//! Pseudo-box diagnostics: FP/FN against the score threshold and the
//! agreement between pseudo-box and ground-truth label assignment.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{decode_boxes, ModelParams};
use crate::error::{Error, Result};
use crate::geometry::{count_fp_fn, nms, BBox};
use crate::pseudolabel::{assignment_consistency, build_pseudo_boxes, ConsistencyMetrics, PipelineConfig};
use crate::rng::keyed_rng;
use crate::synthdata::{import_split, Scene};
use crate::trainer::{infer, Dataset, Precision, TrainConfig};

use super::manifest::{write_artifact, Manifest};
use super::svg::{LineChart, Series};
use super::sweep::rows_to_csv;

/// Image count of the FP/FN sample.
pub const FPFN_SAMPLE: usize = 128;
pub const FPFN_IOU: f64 = 0.5;

pub fn default_thresholds() -> Vec<f64> {
    vec![0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
}

/// The first `n` scenes of an exported split, or of the validation set the
/// config generates.
pub fn load_scenes(dataset: Option<&Path>, cfg: &TrainConfig, n: usize) -> Result<Vec<Scene>> {
    let mut scenes = match dataset {
        Some(path) => import_split(path)?.1.into_iter().map(|(_, s)| s).collect(),
        None => Dataset::new(&cfg.data, cfg.seeds.data)?.val,
    };
    scenes.truncate(n);
    if scenes.is_empty() {
        return Err(Error::EmptyDataset("no scenes to analyse"));
    }
    Ok(scenes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpFnRow {
    pub threshold: f64,
    #[serde(rename = "FP")]
    pub fp: usize,
    #[serde(rename = "FN")]
    pub fn_: usize,
    #[serde(rename = "GT")]
    pub gt: usize,
}

/// Total FP and FN over all images at each threshold.
pub fn fpfn_table(dets: &[Vec<BBox>], gts: &[Vec<BBox>], thresholds: &[f64], iou_thr: f64) -> Vec<FpFnRow> {
    let gt: usize = gts.iter().map(Vec::len).sum();
    thresholds
        .iter()
        .map(|&t| {
            let (fp, fn_) = dets
                .iter()
                .zip(gts)
                .map(|(d, g)| count_fp_fn(d, g, t, iou_thr))
                .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
            FpFnRow {
                threshold: t,
                fp,
                fn_,
                gt,
            }
        })
        .collect()
}

/// Teacher boxes before thresholding: decoded down to `floor`, then
/// class-wise NMS.
pub fn candidate_boxes(
    params: &ModelParams,
    scenes: &[Scene],
    precision: Precision,
    floor: f64,
    sigma_nms: f64,
) -> Result<Vec<Vec<BBox>>> {
    let grid = params.arch.grid();
    scenes
        .par_iter()
        .map(|s| Ok(nms(&decode_boxes(&infer(params, &s.image, precision)?, &grid, floor), sigma_nms)))
        .collect()
}

pub fn fpfn_chart(rows: &[FpFnRow], images: usize) -> LineChart {
    let pts = |f: fn(&FpFnRow) -> usize| rows.iter().map(|r| (r.threshold, f(r) as f64)).collect();
    LineChart {
        title: format!("FP and FN boxes on {images} images"),
        x_label: "score threshold".into(),
        y_label: "boxes".into(),
        series: vec![
            Series::line("FP", pts(|r| r.fp)),
            Series::line("FN", pts(|r| r.fn_)),
            Series::reference("GT", rows.first().map_or(0.0, |r| r.gt as f64)),
        ],
        categorical_x: false,
        x_names: Vec::new(),
    }
}

/// FP/FN sweep of a teacher over `scenes`; writes `fpfn.csv`, `fpfn.svg`
/// and the manifest into `out`.
pub fn analyze_fpfn(
    params: &ModelParams,
    scenes: &[Scene],
    thresholds: &[f64],
    cfg: &TrainConfig,
    out: &Path,
) -> Result<Vec<FpFnRow>> {
    if thresholds.is_empty() {
        return Err(Error::InvalidConfig("no score thresholds given".into()));
    }
    let floor = thresholds.iter().copied().fold(f64::INFINITY, f64::min).max(0.0);
    let dets = candidate_boxes(params, scenes, cfg.precision, floor, cfg.pipeline.sigma_nms)?;
    let gts: Vec<Vec<BBox>> = scenes.iter().map(|s| s.gts.clone()).collect();
    let rows = fpfn_table(&dets, &gts, thresholds, FPFN_IOU);
    let mut manifest = Manifest::new("analyze-fpfn");
    write_artifact(&mut manifest, out, "fpfn.csv", "csv", &rows_to_csv(&rows)?)?;
    write_artifact(&mut manifest, out, "fpfn.svg", "svg", &fpfn_chart(&rows, scenes.len()).render())?;
    manifest.config("train_config", cfg.hash());
    manifest.write(out)?;
    Ok(rows)
}

/// Shift every box by `shift` pixels along each axis, in random directions,
/// and clip it to the image. Boxes that collapse are dropped.
pub fn jitter_boxes(boxes: &[BBox], shift: f64, seed: u64, width: f64, height: f64) -> Vec<BBox> {
    if shift == 0.0 {
        return boxes.to_vec();
    }
    let mut rng = keyed_rng(seed, &[0x7177e4]);
    boxes
        .iter()
        .filter_map(|b| {
            let sx = if rng.random::<bool>() { shift } else { -shift };
            let sy = if rng.random::<bool>() { shift } else { -shift };
            let c = b.translated(sx, sy).clipped(width, height);
            (c.width() > 0.0 && c.height() > 0.0).then_some(c)
        })
        .collect()
}

/// Where the pseudo-boxes come from.
#[derive(Debug, Clone, Copy)]
pub enum TeacherSource<'a> {
    Model(&'a ModelParams, Precision),
    /// Ground truth fed back as score-1 predictions.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentRow {
    pub noise_px: f64,
    pub image: usize,
    pub gt_boxes: usize,
    pub pseudo_boxes: usize,
    pub mask_precision: Option<f64>,
    pub mask_recall: Option<f64>,
    pub mask_iou: Option<f64>,
}

/// Mean of each metric over the images where it is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentSummary {
    pub noise_px: f64,
    pub images: usize,
    pub mask_precision: Option<f64>,
    pub mask_recall: Option<f64>,
    pub mask_iou: Option<f64>,
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.flatten().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn summarize(noise_px: f64, rows: &[AssignmentRow]) -> AssignmentSummary {
    AssignmentSummary {
        noise_px,
        images: rows.len(),
        mask_precision: mean_defined(rows.iter().map(|r| r.mask_precision)),
        mask_recall: mean_defined(rows.iter().map(|r| r.mask_recall)),
        mask_iou: mean_defined(rows.iter().map(|r| r.mask_iou)),
    }
}

/// Per-image assignment consistency of pseudo-boxes (thresholded at
/// `pipeline.sigma_t` after NMS at `pipeline.sigma_nms`) with `noise_px`
/// of injected shift.
pub fn assignment_rows(
    source: TeacherSource,
    scenes: &[Scene],
    pipeline: &PipelineConfig,
    noise_px: f64,
    noise_seed: u64,
) -> Result<Vec<AssignmentRow>> {
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let grid = crate::detector::GridSpec::new(s.image.height, s.image.width, crate::synthdata::NUM_CLASSES);
            let pseudo = match source {
                TeacherSource::Model(params, precision) => {
                    build_pseudo_boxes(&infer(params, &s.image, precision)?, &params.arch.grid(), pipeline)
                }
                TeacherSource::Oracle => s.gts.iter().map(|g| BBox { score: 1.0, ..*g }).collect(),
            };
            let seed = crate::rng::derive_seed(noise_seed, &[i as u64]);
            let pseudo = jitter_boxes(&pseudo, noise_px, seed, s.image.width as f64, s.image.height as f64);
            let m: ConsistencyMetrics = assignment_consistency(&s.gts, &pseudo, &grid);
            Ok(AssignmentRow {
                noise_px,
                image: i,
                gt_boxes: s.gts.len(),
                pseudo_boxes: pseudo.len(),
                mask_precision: m.mask_precision,
                mask_recall: m.mask_recall,
                mask_iou: m.mask_iou,
            })
        })
        .collect()
}

/// Assignment analysis at each noise level; writes `assignment.csv`
/// (per image), `assignment_summary.csv` and the manifest into `out`.
pub fn analyze_assignment(
    source: TeacherSource,
    scenes: &[Scene],
    pipeline: &PipelineConfig,
    noise_levels: &[f64],
    noise_seed: u64,
    out: &Path,
) -> Result<Vec<AssignmentSummary>> {
    let mut all = Vec::new();
    let mut summaries = Vec::new();
    for &noise in noise_levels {
        let rows = assignment_rows(source, scenes, pipeline, noise, noise_seed)?;
        summaries.push(summarize(noise, &rows));
        all.extend(rows);
    }
    let mut manifest = Manifest::new("analyze-assignment");
    write_artifact(&mut manifest, out, "assignment.csv", "csv", &rows_to_csv(&all)?)?;
    write_artifact(
        &mut manifest,
        out,
        "assignment_summary.csv",
        "csv",
        &rows_to_csv(&summaries)?,
    )?;
    manifest.config("pipeline", crate::trainer::config_hash(pipeline));
    manifest.write(out)?;
    Ok(summaries)
}
