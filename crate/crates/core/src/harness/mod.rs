//! Experiment plumbing behind the command line: dataset export, evaluation,
//! sweeps, ablation presets and pseudo-box diagnostics. Every command
//! writes its artifacts and a `manifest.json` under one output directory.

pub mod ablate;
pub mod analysis;
pub mod manifest;
pub mod runs;
pub mod svg;
pub mod sweep;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ApSummary;
use crate::synthdata::export_split;
use crate::trainer::{evaluate, load_checkpoint, Dataset, TrainConfig};

pub use ablate::{preset_rows, run_ablation, AblationResult, Preset};
pub use analysis::{analyze_assignment, analyze_fpfn, TeacherSource};
pub use manifest::Manifest;
pub use runs::{RunRecord, RunStore};
pub use sweep::{run_sweep, SweepParam, SweepRow, SweepSpec};

/// Scene ids of a generated dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIds {
    pub data_seed: u64,
    pub labeled_ids: Vec<usize>,
    pub unlabeled_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
}

/// Export the labeled, unlabeled and validation splits a config defines,
/// plus `splits.json` with their ids.
pub fn generate(cfg: &TrainConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let data = Dataset::new(&cfg.data, cfg.seeds.data)?;
    let ids = SplitIds {
        data_seed: cfg.seeds.data,
        labeled_ids: data.split.labeled_ids.clone(),
        unlabeled_ids: data.split.unlabeled_ids.clone(),
        val_ids: (cfg.data.num_train..cfg.data.num_train + cfg.data.num_val).collect(),
    };
    let mut manifest = Manifest::new("generate");
    for (name, list) in [("labeled", &ids.labeled_ids), ("unlabeled", &ids.unlabeled_ids)] {
        let scenes: Vec<_> = list.iter().map(|&id| (id, data.scene(id))).collect();
        let (blob, json) = export_split(out, name, &scenes, &cfg.data.generator, cfg.seeds.data)?;
        manifest.add(out, &blob, "images")?;
        manifest.add(out, &json, "split")?;
    }
    let val: Vec<_> = ids.val_ids.iter().copied().zip(data.val.iter().cloned()).collect();
    let (blob, json) = export_split(out, "val", &val, &cfg.data.generator, cfg.seeds.data)?;
    manifest.add(out, &blob, "images")?;
    manifest.add(out, &json, "split")?;
    let text = serde_json::to_string_pretty(&ids).map_err(|e| Error::json("split ids", e))?;
    manifest::write_artifact(&mut manifest, out, "splits.json", "split ids", &text)?;
    manifest.config("train_config", cfg.hash());
    manifest.config("data_config", crate::trainer::config_hash(&cfg.data));
    manifest.write(out)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub iteration: u64,
    pub images: usize,
    /// Percentages.
    pub teacher: [f64; 3],
    pub student: [f64; 3],
}

fn pct(a: ApSummary) -> [f64; 3] {
    [100.0 * a.ap, 100.0 * a.ap50, 100.0 * a.ap75]
}

/// AP, AP50 and AP75 of both models of a checkpoint on an exported split
/// or, without one, on the config's validation set.
pub fn eval_checkpoint(checkpoint: &Path, cfg: &TrainConfig, dataset: Option<&Path>, out: &Path) -> Result<EvalReport> {
    let state = load_checkpoint(checkpoint)?;
    let scenes = analysis::load_scenes(dataset, cfg, usize::MAX)?;
    let report = EvalReport {
        checkpoint: checkpoint.display().to_string(),
        iteration: state.iteration,
        images: scenes.len(),
        teacher: pct(evaluate(&state.teacher, &scenes, cfg.precision)?),
        student: pct(evaluate(&state.student, &scenes, cfg.precision)?),
    };
    let mut manifest = Manifest::new("eval");
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::json("eval report", e))?;
    manifest::write_artifact(&mut manifest, out, "eval.json", "eval report", &text)?;
    manifest.add(out, checkpoint, "checkpoint")?;
    manifest.config("train_config", cfg.hash());
    manifest.write(out)?;
    Ok(report)
}
