//! Procedural shape-detection scenes, labeled/unlabeled splits and the
//! weak/strong augmentation pair.
//!
//! Scenes hold circles (class 0), squares (class 1) and triangles (class 2)
//! in random colours over a noisy gradient background, plus unlabeled
//! clutter (bars, rings, crosses). All generators are pure functions of
//! `(seed, config)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::rng::{derive_seed, keyed_rng};

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["circle", "square", "triangle"];
/// Fill value for cutout regions.
pub const DATASET_MEAN: f32 = 0.5;

/// H x W x 3 image, row-major HWC, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * 3 + c
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = self.idx(y, x, 0);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = self.idx(y, x, 0);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn flipped_horizontally(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, self.width - 1 - x, self.pixel(y, x));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub gts: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    /// Object side length range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    pub max_objects: usize,
    /// Maximum pairwise IoU allowed between ground-truth boxes.
    pub crowding: f64,
    /// Standard deviation of additive background noise.
    pub noise: f64,
    /// Upper bound on unlabeled clutter items per scene.
    pub max_distractors: usize,
    /// Minimum |fill - background| per channel-average.
    pub min_contrast: f64,
    pub max_retries: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            min_size: 12.0,
            max_size: 40.0,
            max_objects: 4,
            crowding: 0.2,
            noise: 0.06,
            max_distractors: 3,
            min_contrast: 0.15,
            max_retries: 100,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("gen: {m}")));
        if self.height < 16 || self.width < 16 {
            return bad("image must be at least 16x16");
        }
        if !(self.min_size >= 4.0 && self.max_size >= self.min_size) {
            return bad("need 4 <= min_size <= max_size");
        }
        if self.max_size > self.height.min(self.width) as f64 {
            return bad("max_size exceeds the image");
        }
        if self.max_objects == 0 {
            return bad("max_objects must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.crowding) {
            return bad("crowding must lie in [0, 1]");
        }
        if !(self.noise >= 0.0) || !(0.0..=0.5).contains(&self.min_contrast) {
            return bad("noise must be >= 0 and min_contrast in [0, 0.5]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Circle,
    Square,
    Triangle { pointing_up: bool },
    Bar,
    Ring,
    Cross,
}

fn inside(shape: Shape, b: &BBox, px: f64, py: f64) -> bool {
    if px < b.x1 || px > b.x2 || py < b.y1 || py > b.y2 {
        return false;
    }
    let (cx, cy) = ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0);
    let (w, h) = (b.width(), b.height());
    match shape {
        Shape::Circle => {
            let r = w / 2.0;
            (px - cx).powi(2) + (py - cy).powi(2) <= r * r
        }
        Shape::Square | Shape::Bar => true,
        Shape::Triangle { pointing_up } => {
            // apex at the top (or bottom) centre, base on the opposite edge
            let depth = if pointing_up { py - b.y1 } else { b.y2 - py };
            (px - cx).abs() <= 0.5 * w * depth / h
        }
        Shape::Ring => {
            let r = w / 2.0;
            let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
            d <= r && d >= r - (w * 0.15).max(1.5)
        }
        Shape::Cross => {
            let t = (w * 0.12).max(1.0);
            (px - cx).abs() <= t || (py - cy).abs() <= t
        }
    }
}

fn paint(image: &mut Image, shape: Shape, b: &BBox, rgb: [f32; 3]) {
    let y0 = b.y1.floor().max(0.0) as usize;
    let y1 = (b.y2.ceil() as usize).min(image.height);
    let x0 = b.x1.floor().max(0.0) as usize;
    let x1 = (b.x2.ceil() as usize).min(image.width);
    for y in y0..y1 {
        for x in x0..x1 {
            if inside(shape, b, x as f64 + 0.5, y as f64 + 0.5) {
                image.set_pixel(y, x, rgb);
            }
        }
    }
}

fn random_colour<R: Rng>(rng: &mut R, background: f32, min_contrast: f64) -> [f32; 3] {
    for _ in 0..64 {
        let c: [f32; 3] = std::array::from_fn(|_| rng.random::<f32>());
        let mean = (c[0] + c[1] + c[2]) / 3.0;
        if (mean - background).abs() as f64 >= min_contrast {
            return c;
        }
    }
    let v = if background < 0.5 { 0.95 } else { 0.05 };
    [v; 3]
}

/// Deterministic scene for `seed`. Placement uses rejection sampling under
/// the crowding limit; when a slot cannot be placed after `max_retries`
/// draws the scene keeps the objects placed so far (at least one).
pub fn generate_scene(seed: u64, cfg: &GenConfig) -> Scene {
    let mut rng = keyed_rng(seed, &[]);
    let (h, w) = (cfg.height, cfg.width);

    // background: base level plus a linear gradient
    let base: f32 = rng.random_range(0.1..0.6);
    let gx: f32 = rng.random_range(-0.15..0.15);
    let gy: f32 = rng.random_range(-0.15..0.15);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let mut image = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let t = base + gx * (x as f32 / w as f32 - 0.5) + gy * (y as f32 / h as f32 - 0.5);
            image.set_pixel(y, x, std::array::from_fn(|c| t + tint[c]));
        }
    }

    let n_distractors = rng.random_range(0..=cfg.max_distractors);
    for _ in 0..n_distractors {
        let kind = rng.random_range(0..3);
        let s: f64 = rng.random_range(cfg.min_size..=cfg.max_size);
        let (bw, bh, shape) = match kind {
            0 => {
                let thick = rng.random_range(2.0..4.0);
                if rng.random_bool(0.5) {
                    (s, thick, Shape::Bar)
                } else {
                    (thick, s, Shape::Bar)
                }
            }
            1 => (s, s, Shape::Ring),
            _ => (s, s, Shape::Cross),
        };
        let x = rng.random_range(0.0..=(w as f64 - bw));
        let y = rng.random_range(0.0..=(h as f64 - bh));
        let colour = random_colour(&mut rng, base, cfg.min_contrast);
        paint(&mut image, shape, &BBox::gt(x, y, x + bw, y + bh, 0), colour);
    }

    let target = rng.random_range(1..=cfg.max_objects);
    let mut gts: Vec<BBox> = Vec::with_capacity(target);
    'slots: for _ in 0..target {
        for _ in 0..cfg.max_retries.max(1) {
            let s: f64 = rng.random_range(cfg.min_size..=cfg.max_size);
            let x = rng.random_range(0.0..=(w as f64 - s));
            let y = rng.random_range(0.0..=(h as f64 - s));
            let class_id = rng.random_range(0..NUM_CLASSES);
            let cand = BBox::gt(x, y, x + s, y + s, class_id);
            let fits = gts.iter().all(|g| {
                let v = iou(g, &cand);
                if cfg.crowding == 0.0 {
                    v == 0.0
                } else {
                    v <= cfg.crowding
                }
            });
            if fits {
                let shape = match class_id {
                    0 => Shape::Circle,
                    1 => Shape::Square,
                    _ => Shape::Triangle {
                        pointing_up: rng.random_bool(0.5),
                    },
                };
                let colour = random_colour(&mut rng, base, cfg.min_contrast);
                paint(&mut image, shape, &cand, colour);
                gts.push(cand);
                continue 'slots;
            }
        }
        break;
    }

    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0f32, cfg.noise as f32).expect("noise sigma is finite");
        for v in image.data.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    } else {
        for v in image.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Scene { image, gts }
}

/// Seed of scene `id` in a dataset generated from `data_seed`.
pub fn scene_seed(data_seed: u64, id: usize) -> u64 {
    derive_seed(data_seed, &[0x5ce4e, id as u64])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub labeled_ids: Vec<usize>,
    pub unlabeled_ids: Vec<usize>,
    pub seed: u64,
}

/// Uniform random labeled/unlabeled partition of `0..n`. The labeled count
/// is `round(n * labeled_fraction)`, at least one.
pub fn split_dataset(n: usize, labeled_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if n == 0 {
        return Err(Error::EmptyDataset("split of zero scenes"));
    }
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "labeled_fraction {labeled_fraction} outside (0, 1]"
        )));
    }
    let n_labeled = ((n as f64 * labeled_fraction).round() as usize).clamp(1, n);
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut keyed_rng(seed, &[0x5b11]));
    let mut labeled_ids = ids[..n_labeled].to_vec();
    let mut unlabeled_ids = ids[n_labeled..].to_vec();
    labeled_ids.sort_unstable();
    unlabeled_ids.sort_unstable();
    Ok(DatasetSplit {
        labeled_ids,
        unlabeled_ids,
        seed,
    })
}

/// Geometric transform shared by the weak and strong views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TransformRecord {
    pub flip: bool,
}

pub fn apply_transform(scene: &Scene, record: &TransformRecord) -> Scene {
    if !record.flip {
        return scene.clone();
    }
    let w = scene.image.width as f64;
    Scene {
        image: scene.image.flipped_horizontally(),
        gts: scene
            .gts
            .iter()
            .map(|b| BBox {
                x1: w - b.x2,
                x2: w - b.x1,
                ..*b
            })
            .collect(),
    }
}

/// Horizontal flip with probability 0.5.
pub fn weak_augment(scene: &Scene, seed: u64) -> (Scene, TransformRecord) {
    let record = TransformRecord {
        flip: keyed_rng(seed, &[0xf11b]).random_bool(0.5),
    };
    (apply_transform(scene, &record), record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrongAugConfig {
    /// Brightness offset drawn from [-brightness, brightness].
    pub brightness: f64,
    /// Contrast factor drawn from [1 - contrast, 1 + contrast].
    pub contrast: f64,
    /// Noise sigma drawn from [0, noise_sigma].
    pub noise_sigma: f64,
    pub cutout_min: usize,
    pub cutout_max: usize,
    /// Cutout side length range in pixels.
    pub cutout_min_size: usize,
    pub cutout_max_size: usize,
}

impl Default for StrongAugConfig {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast: 0.3,
            noise_sigma: 0.06,
            cutout_min: 1,
            cutout_max: 3,
            cutout_min_size: 8,
            cutout_max_size: 24,
        }
    }
}

impl StrongAugConfig {
    /// Photometric identity: the strong view equals the weak view.
    pub fn identity() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            noise_sigma: 0.0,
            cutout_min: 0,
            cutout_max: 0,
            cutout_min_size: 0,
            cutout_max_size: 0,
        }
    }
}

/// Pixel rectangle `[x0, x1) x [y0, y1)` that was filled by a cutout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cutout {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Strong view: the shared geometric transform, then brightness/contrast
/// jitter, Gaussian noise and rectangular cutouts. Ground truth follows the
/// geometric transform only.
pub fn strong_augment(scene: &Scene, seed: u64, shared: &TransformRecord, cfg: &StrongAugConfig) -> Scene {
    strong_augment_with_cutouts(scene, seed, shared, cfg).0
}

pub fn strong_augment_with_cutouts(
    scene: &Scene,
    seed: u64,
    shared: &TransformRecord,
    cfg: &StrongAugConfig,
) -> (Scene, Vec<Cutout>) {
    let mut out = apply_transform(scene, shared);
    let mut rng = keyed_rng(seed, &[0x5707]);
    let img = &mut out.image;

    let brightness = if cfg.brightness > 0.0 {
        rng.random_range(-cfg.brightness..=cfg.brightness) as f32
    } else {
        0.0
    };
    let contrast = if cfg.contrast > 0.0 {
        rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast) as f32
    } else {
        1.0
    };
    if brightness != 0.0 || contrast != 1.0 {
        for v in img.data.iter_mut() {
            *v = ((*v - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0);
        }
    }
    if cfg.noise_sigma > 0.0 {
        let sigma = rng.random_range(0.0..=cfg.noise_sigma) as f32;
        if sigma > 0.0 {
            let normal = Normal::new(0.0f32, sigma).expect("finite sigma");
            for v in img.data.iter_mut() {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }
    let mut cutouts = Vec::new();
    if cfg.cutout_max > 0 && cfg.cutout_max_size > 0 {
        let count = rng.random_range(cfg.cutout_min.min(cfg.cutout_max)..=cfg.cutout_max);
        for _ in 0..count {
            let lo = cfg.cutout_min_size.max(1);
            let hi = cfg.cutout_max_size.max(lo);
            let cw = rng.random_range(lo..=hi).min(img.width);
            let ch = rng.random_range(lo..=hi).min(img.height);
            let x0 = rng.random_range(0..=img.width - cw);
            let y0 = rng.random_range(0..=img.height - ch);
            for y in y0..y0 + ch {
                for x in x0..x0 + cw {
                    img.set_pixel(y, x, [DATASET_MEAN; 3]);
                }
            }
            cutouts.push(Cutout {
                x0,
                y0,
                x1: x0 + cw,
                y1: y0 + ch,
            });
        }
    }
    (out, cutouts)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: usize,
    /// Offset of the image in the blob, in f32 elements.
    pub offset: usize,
    pub gts: Vec<BBox>,
}

/// JSON sidecar describing a float32 image blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSidecar {
    pub split: String,
    pub blob: String,
    pub layout: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
    pub generator: GenConfig,
    pub scenes: Vec<SceneRecord>,
}

/// Write `<dir>/<name>.f32` (little-endian float32 HWC images back to back)
/// and the `<dir>/<name>.json` sidecar. Returns the two paths.
pub fn export_split(
    dir: &Path,
    name: &str,
    scenes: &[(usize, Scene)],
    generator: &GenConfig,
    seed: u64,
) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob_name = format!("{name}.f32");
    let blob_path = dir.join(&blob_name);
    let json_path = dir.join(format!("{name}.json"));
    let mut bytes = Vec::new();
    let mut records = Vec::with_capacity(scenes.len());
    for (id, scene) in scenes {
        records.push(SceneRecord {
            id: *id,
            offset: bytes.len() / 4,
            gts: scene.gts.clone(),
        });
        for v in &scene.image.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&blob_path, e))?;
    let sidecar = SplitSidecar {
        split: name.to_string(),
        blob: blob_name,
        layout: "HWC".into(),
        height: generator.height,
        width: generator.width,
        channels: 3,
        seed,
        generator: generator.clone(),
        scenes: records,
    };
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json("sidecar", e))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok((blob_path, json_path))
}

/// Read a split written by [`export_split`].
pub fn import_split(json_path: &Path) -> Result<(SplitSidecar, Vec<(usize, Scene)>)> {
    let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let sidecar: SplitSidecar =
        serde_json::from_str(&text).map_err(|e| Error::json(json_path.display().to_string(), e))?;
    let blob_path = json_path.with_file_name(&sidecar.blob);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let per_image = sidecar.height * sidecar.width * sidecar.channels;
    let mut scenes = Vec::with_capacity(sidecar.scenes.len());
    for rec in &sidecar.scenes {
        let start = rec.offset * 4;
        let end = start + per_image * 4;
        if end > bytes.len() {
            return Err(Error::Truncated(format!("{} ends early", blob_path.display())));
        }
        let data = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        scenes.push((
            rec.id,
            Scene {
                image: Image {
                    height: sidecar.height,
                    width: sidecar.width,
                    data,
                },
                gts: rec.gts.clone(),
            },
        ));
    }
    Ok((sidecar, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_valid() {
        let cfg = GenConfig::default();
        for seed in 0..50 {
            let a = generate_scene(seed, &cfg);
            assert_eq!(a, generate_scene(seed, &cfg));
            assert!(!a.gts.is_empty() && a.gts.len() <= cfg.max_objects);
            for g in &a.gts {
                assert!(g.x1 >= 0.0 && g.y1 >= 0.0 && g.x2 <= 128.0 && g.y2 <= 128.0);
                assert!(g.area() >= 16.0);
                assert!(g.class_id < NUM_CLASSES);
            }
            assert!(a.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zero_crowding_means_no_overlap() {
        let cfg = GenConfig {
            crowding: 0.0,
            max_objects: 8,
            ..GenConfig::default()
        };
        for seed in 0..200 {
            let s = generate_scene(seed, &cfg);
            for (i, a) in s.gts.iter().enumerate() {
                for b in &s.gts[i + 1..] {
                    assert_eq!(iou(a, b), 0.0);
                }
            }
        }
    }

    #[test]
    fn crowding_limit_holds_over_many_scenes() {
        let cfg = GenConfig {
            crowding: 0.6,
            max_objects: 8,
            ..GenConfig::default()
        };
        let mut max_seen: f64 = 0.0;
        for seed in 0..1000 {
            let s = generate_scene(seed, &cfg);
            for (i, a) in s.gts.iter().enumerate() {
                for b in &s.gts[i + 1..] {
                    max_seen = max_seen.max(iou(a, b));
                }
            }
        }
        assert!(max_seen <= 0.6, "max pairwise IoU {max_seen}");
        assert!(max_seen > 0.0);
    }

    #[test]
    fn splits() {
        let s = split_dataset(100, 0.1, 7).unwrap();
        assert_eq!((s.labeled_ids.len(), s.unlabeled_ids.len()), (10, 90));
        let s = split_dataset(100, 1.0, 7).unwrap();
        assert_eq!(s.labeled_ids.len(), 100);
        assert!(s.unlabeled_ids.is_empty());
        assert!(split_dataset(0, 0.5, 0).is_err());
        assert!(split_dataset(10, 0.0, 0).is_err());
    }

    #[test]
    fn splits_are_partitions_and_vary_with_seed() {
        let mut distinct = std::collections::BTreeSet::new();
        for seed in 0..100 {
            let s = split_dataset(200, 0.1, seed).unwrap();
            let mut all: Vec<usize> = s.labeled_ids.iter().chain(&s.unlabeled_ids).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..200).collect::<Vec<_>>());
            assert_eq!(s.labeled_ids.len(), 20);
            distinct.insert(s.labeled_ids.clone());
        }
        assert_eq!(distinct.len(), 100);
    }

    fn one_box_scene() -> Scene {
        let mut image = Image::filled(128, 128, 0.2);
        for y in 40..60 {
            for x in 10..30 {
                image.set_pixel(y, x, [0.9, 0.1, 0.4]);
            }
        }
        Scene {
            image,
            gts: vec![BBox::gt(10.0, 40.0, 30.0, 60.0, 1)],
        }
    }

    #[test]
    fn flip_maps_boxes_and_pixels_consistently() {
        let scene = one_box_scene();
        let rec = TransformRecord { flip: true };
        let flipped = apply_transform(&scene, &rec);
        let g = flipped.gts[0];
        assert_eq!((g.x1, g.x2), (98.0, 118.0));
        // re-rasterised extent of the painted square
        let cols: Vec<usize> = (0..128)
            .filter(|&x| flipped.image.pixel(50, x) == [0.9, 0.1, 0.4])
            .collect();
        assert_eq!((cols[0], *cols.last().unwrap() + 1), (98, 118));
        assert_eq!(apply_transform(&flipped, &rec), scene);
        assert_eq!(apply_transform(&scene, &TransformRecord { flip: false }), scene);
    }

    #[test]
    fn weak_augment_flips_about_half_the_time() {
        let scene = one_box_scene();
        let flips = (0..400).filter(|&s| weak_augment(&scene, s).1.flip).count();
        assert!((150..250).contains(&flips), "{flips}");
    }

    #[test]
    fn strong_view_shares_geometry() {
        let scene = generate_scene(3, &GenConfig::default());
        for seed in 0..20 {
            let (weak, rec) = weak_augment(&scene, seed);
            let strong = strong_augment(&scene, seed, &rec, &StrongAugConfig::identity());
            assert_eq!(strong, weak);
            let strong = strong_augment(&scene, seed, &rec, &StrongAugConfig::default());
            assert_eq!(strong.gts, weak.gts);
        }
    }

    #[test]
    fn cutouts_fill_mean_and_count_in_range() {
        let cfg = GenConfig::default();
        let aug = StrongAugConfig::default();
        for seed in 0..100 {
            let scene = generate_scene(seed, &cfg);
            let (_, rec) = weak_augment(&scene, seed);
            let (strong, cutouts) = strong_augment_with_cutouts(&scene, seed, &rec, &aug);
            assert!((1..=3).contains(&cutouts.len()));
            for c in &cutouts {
                for y in c.y0..c.y1 {
                    for x in c.x0..c.x1 {
                        assert_eq!(strong.image.pixel(y, x), [DATASET_MEAN; 3]);
                    }
                }
            }
        }
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig::default();
        let scenes: Vec<(usize, Scene)> = (0..3).map(|i| (i, generate_scene(i as u64, &cfg))).collect();
        export_split(dir.path(), "train", &scenes, &cfg, 9).unwrap();
        let (side, back) = import_split(&dir.path().join("train.json")).unwrap();
        assert_eq!(side.seed, 9);
        assert_eq!(back.len(), scenes.len());
        for ((i, a), (j, b)) in back.iter().zip(&scenes) {
            assert_eq!(i, j);
            assert_eq!(a.gts, b.gts, "scene {i}");
            assert!(a.image == b.image, "scene {i} pixels differ");
        }
    }
}
