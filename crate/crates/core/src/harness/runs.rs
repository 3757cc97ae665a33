//! Run store: one directory per config hash, with burn-in checkpoints
//! shared between runs that only differ after burn-in.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudolabel::PipelineConfig;
use crate::trainer::{train, TrainConfig};

/// Final AP50 (percent) below which a run counts as failed to converge.
pub const MIN_CONVERGED_AP50: f64 = 1.0;

/// Outcome of one training run. AP values are percentages of the model
/// selected by `eval_model`; they are absent when training aborted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub diverged: bool,
    pub note: String,
    pub run_dir: PathBuf,
    pub seconds: f64,
}

impl RunRecord {
    /// AP50 with aborted runs counted as 0.
    pub fn ap50_or_zero(&self) -> f64 {
        self.ap50.unwrap_or(0.0)
    }
}

/// The config that reproduces the burn-in phase of `cfg`. Fields that only
/// act after burn-in are reset, so runs sharing a burn-in map to one key.
pub fn burn_in_config(cfg: &TrainConfig) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        w_u: 0.0,
        ema_momentum: d.ema_momentum,
        batch_unlabeled: d.batch_unlabeled,
        total_iters: cfg.burn_in_iters,
        checkpoint_interval: 0,
        eval_model: d.eval_model,
        pipeline: PipelineConfig {
            gamma: cfg.pipeline.gamma,
            ..PipelineConfig::default()
        },
        ..cfg.clone()
    }
}

#[derive(Debug, Clone)]
pub struct RunStore {
    pub root: PathBuf,
    /// Reuse finished runs found under `root`.
    pub reuse: bool,
}

fn short(hash: &str) -> &str {
    &hash[..16.min(hash.len())]
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            reuse: true,
        }
    }

    pub fn run_dir(&self, cfg: &TrainConfig) -> PathBuf {
        self.root.join(format!("run-{}", short(&cfg.hash())))
    }

    fn burn_in_dir(&self, cfg: &TrainConfig) -> PathBuf {
        self.root.join(format!("burnin-{}", short(&burn_in_config(cfg).hash())))
    }

    fn shares_burn_in(cfg: &TrainConfig) -> bool {
        cfg.burn_in_iters > 0 && cfg.burn_in_iters < cfg.total_iters
    }

    fn cached(&self, cfg: &TrainConfig) -> Option<RunRecord> {
        if !self.reuse {
            return None;
        }
        let text = fs::read_to_string(self.run_dir(cfg).join("record.json")).ok()?;
        let rec: RunRecord = serde_json::from_str(&text).ok()?;
        (rec.config_hash == cfg.hash()).then_some(rec)
    }

    /// Train the shared burn-in phase unless its checkpoint exists.
    fn ensure_burn_in(&self, cfg: &TrainConfig) -> Result<PathBuf> {
        let dir = self.burn_in_dir(cfg);
        let ckpt = dir.join("checkpoint.dtck");
        if !(self.reuse && ckpt.exists()) {
            log::info!("burn-in {} ({} iterations)", dir.display(), cfg.burn_in_iters);
            train(&burn_in_config(cfg), &dir, None)?;
        }
        Ok(ckpt)
    }

    fn execute(&self, cfg: &TrainConfig, dir: &Path) -> Result<crate::trainer::TrainOutcome> {
        if !Self::shares_burn_in(cfg) {
            return train(cfg, dir, None);
        }
        let ckpt = self.ensure_burn_in(cfg)?;
        // Keep the burn-in rows so the run's CSVs cover every iteration.
        let bdir = self.burn_in_dir(cfg);
        for name in ["metrics.csv", "eval.csv"] {
            let (from, to) = (bdir.join(name), dir.join(name));
            fs::copy(&from, &to).map_err(|e| Error::io(&from, e))?;
        }
        train(cfg, dir, Some(&ckpt))
    }

    /// Run `cfg` to completion, or return its stored record. Training
    /// errors become flagged records; only store IO errors propagate.
    pub fn run(&self, cfg: &TrainConfig) -> Result<RunRecord> {
        if let Some(rec) = self.cached(cfg) {
            return Ok(rec);
        }
        cfg.validate()?;
        let dir = self.run_dir(cfg);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let started = std::time::Instant::now();
        let mut rec = RunRecord {
            config_hash: cfg.hash(),
            seed: cfg.seeds.data,
            ap: None,
            ap50: None,
            ap75: None,
            diverged: false,
            note: String::new(),
            run_dir: dir.clone(),
            seconds: 0.0,
        };
        match self.execute(cfg, &dir) {
            Ok(out) => {
                let a = out.final_ap(cfg.eval_model);
                rec.ap = Some(100.0 * a.ap);
                rec.ap50 = Some(100.0 * a.ap50);
                rec.ap75 = Some(100.0 * a.ap75);
                if 100.0 * a.ap50 < MIN_CONVERGED_AP50 {
                    rec.diverged = true;
                    rec.note = format!("final AP50 below {MIN_CONVERGED_AP50}");
                }
            }
            Err(e @ Error::Io { .. }) => return Err(e),
            Err(e) => {
                rec.diverged = true;
                rec.note = format!("{} error: {e}", e.category());
            }
        }
        rec.seconds = started.elapsed().as_secs_f64();
        let path = dir.join("record.json");
        let text = serde_json::to_string_pretty(&rec).map_err(|e| Error::json("run record", e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(rec)
    }

    /// Run many configs. Shared burn-ins are trained first, then the runs;
    /// both phases may proceed in parallel. Results keep the input order.
    pub fn run_all(&self, cfgs: &[TrainConfig]) -> Result<Vec<RunRecord>> {
        let mut burn_ins: Vec<&TrainConfig> = Vec::new();
        for c in cfgs.iter().filter(|c| Self::shares_burn_in(c) && self.cached(c).is_none()) {
            if !burn_ins.iter().any(|b| self.burn_in_dir(b) == self.burn_in_dir(c)) {
                burn_ins.push(c);
            }
        }
        burn_ins
            .par_iter()
            .map(|c| match self.ensure_burn_in(c) {
                // A failed burn-in is retried and flagged by each run.
                Err(e @ Error::Io { .. }) => Err(e),
                _ => Ok(()),
            })
            .collect::<Result<Vec<()>>>()?;
        cfgs.par_iter().map(|c| self.run(c)).collect()
    }
}
