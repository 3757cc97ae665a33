use rayon::prelude::*;

use crate::detector::{decode_boxes, predict, DenseOutput, ModelParams, Weights};
use crate::error::Result;
use crate::geometry::{average_precision, nms, ApSummary, BBox};
use crate::synthdata::{Image, Scene};

use super::config::Precision;

/// Score floor, NMS threshold and per-image cap used at evaluation.
pub const EVAL_SCORE_FLOOR: f64 = 0.05;
pub const EVAL_NMS: f64 = 0.6;
pub const MAX_DETECTIONS: usize = 100;

/// Forward pass in the requested precision.
pub fn infer(params: &ModelParams, image: &Image, precision: Precision) -> Result<DenseOutput> {
    match precision {
        Precision::F32 => predict(&Weights::<f32>::from_params(params), image),
        Precision::F64 => predict(&Weights::<f64>::from_params(params), image),
    }
}

/// Final detections of one dense output: decode, class-wise NMS, top 100.
pub fn postprocess(output: &DenseOutput, params: &ModelParams) -> Vec<BBox> {
    let mut dets = nms(&decode_boxes(output, &params.arch.grid(), EVAL_SCORE_FLOOR), EVAL_NMS);
    dets.truncate(MAX_DETECTIONS);
    dets
}

pub fn detect(params: &ModelParams, image: &Image, precision: Precision) -> Result<Vec<BBox>> {
    Ok(postprocess(&infer(params, image, precision)?, params))
}

/// Detections for every scene, in order.
pub fn detect_all(params: &ModelParams, scenes: &[Scene], precision: Precision) -> Result<Vec<Vec<BBox>>> {
    scenes
        .par_iter()
        .map(|s| detect(params, &s.image, precision))
        .collect()
}

/// COCO-style AP of a model over scenes (fractions in [0, 1]).
pub fn evaluate(params: &ModelParams, scenes: &[Scene], precision: Precision) -> Result<ApSummary> {
    let dets = detect_all(params, scenes, precision)?;
    let gts: Vec<Vec<BBox>> = scenes.iter().map(|s| s.gts.clone()).collect();
    Ok(average_precision(&dets, &gts))
}
