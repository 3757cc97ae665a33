use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::ArchConfig;
use crate::error::{Error, Result};
use crate::pseudolabel::PipelineConfig;
use crate::synthdata::{GenConfig, StrongAugConfig};

/// Independent RNG streams: scene generation and batch sampling, view
/// augmentation, weight initialisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub augment: u64,
    pub init: u64,
}

impl Seeds {
    /// All three streams derived from one run seed.
    pub fn from_run_seed(seed: u64) -> Self {
        Self {
            data: seed,
            augment: seed.wrapping_add(1000),
            init: seed.wrapping_add(2000),
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Self::from_run_seed(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModel {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub generator: GenConfig,
    /// Training pool size; ids `0..num_train`.
    pub num_train: usize,
    pub labeled_fraction: f64,
    /// Validation scenes use ids `num_train..num_train + num_val`.
    pub num_val: usize,
    pub strong_aug: StrongAugConfig,
    /// Also apply the photometric strong augmentation to labeled images.
    pub labeled_strong_aug: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: GenConfig::default(),
            num_train: 1000,
            labeled_fraction: 0.1,
            num_val: 200,
            strong_aug: StrongAugConfig::default(),
            labeled_strong_aug: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    /// Unsupervised loss weight.
    pub w_u: f64,
    /// EMA momentum of the teacher.
    pub ema_momentum: f64,
    pub burn_in_iters: u64,
    /// Total iterations, burn-in included.
    pub total_iters: u64,
    /// Evaluation period; the last iteration is always evaluated.
    pub eval_interval: u64,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_interval: u64,
    pub eval_model: EvalModel,
    pub precision: Precision,
    pub pipeline: PipelineConfig,
    pub seeds: Seeds,
    pub arch: ArchConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_labeled: 8,
            batch_unlabeled: 8,
            w_u: 4.0,
            ema_momentum: 0.999,
            burn_in_iters: 1000,
            total_iters: 4000,
            eval_interval: 500,
            checkpoint_interval: 0,
            eval_model: EvalModel::Teacher,
            precision: Precision::F32,
            pipeline: PipelineConfig::default(),
            seeds: Seeds::default(),
            arch: ArchConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Supervised-only baseline: no unlabeled term.
    pub fn supervised() -> Self {
        Self {
            w_u: 0.0,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = Seeds::from_run_seed(seed);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} is negative", self.weight_decay));
        }
        if self.batch_labeled == 0 {
            return bad("batch_labeled must be >= 1".into());
        }
        if !(self.w_u >= 0.0 && self.w_u.is_finite()) {
            return bad(format!("w_u {} must be >= 0", self.w_u));
        }
        if self.w_u > 0.0 && self.batch_unlabeled == 0 {
            return bad("w_u > 0 needs batch_unlabeled >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return bad(format!("ema_momentum {} outside [0, 1]", self.ema_momentum));
        }
        if self.burn_in_iters > self.total_iters {
            return bad(format!(
                "burn_in_iters {} exceeds total_iters {}",
                self.burn_in_iters, self.total_iters
            ));
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be >= 1".into());
        }
        self.pipeline.validate()?;
        self.arch.validate()?;
        self.data.generator.validate()?;
        if self.data.generator.height != self.arch.image_height || self.data.generator.width != self.arch.image_width {
            return bad("generator image size differs from the architecture's".into());
        }
        if self.data.num_train == 0 {
            return Err(Error::EmptyDataset("num_train is 0"));
        }
        if self.data.num_val == 0 {
            return Err(Error::EmptyDataset("num_val is 0"));
        }
        Ok(())
    }

    /// Parse a JSON config; unknown keys are rejected by name.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::json("train config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// SHA-256 (hex) of the compact JSON encoding of any serialisable value.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("value serialises");
    hex::encode(Sha256::digest(text.as_bytes()))
}
