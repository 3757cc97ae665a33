use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::pseudolabel::{HardNegativeStrategy, PipelineMode};
use crate::trainer::TrainConfig;

use super::manifest::{write_artifact, Manifest};
use super::runs::{RunRecord, RunStore};
use super::svg::{LineChart, Marker, MarkerKind, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    SigmaT,
    SigmaNms,
    KPercent,
    WU,
    HnStrategy,
    Mode,
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::SigmaT => "sigma_t",
            SweepParam::SigmaNms => "sigma_nms",
            SweepParam::KPercent => "k_percent",
            SweepParam::WU => "w_u",
            SweepParam::HnStrategy => "hn_strategy",
            SweepParam::Mode => "mode",
        }
    }

    /// The default grid of each parameter.
    pub fn default_values(&self) -> Vec<Value> {
        let nums = |v: &[f64]| v.iter().map(|x| Value::from(*x)).collect();
        match self {
            SweepParam::SigmaT => nums(&[0.3, 0.5, 0.7, 0.9]),
            SweepParam::SigmaNms => nums(&[0.3, 0.5, 0.7, 0.9]),
            SweepParam::KPercent => nums(&[0.1, 0.5, 1.0, 3.0, 5.0]),
            SweepParam::WU => nums(&[2.0, 4.0, 8.0]),
            SweepParam::HnStrategy => ["suppress", "ignore", "select"].map(Value::from).to_vec(),
            SweepParam::Mode => ["pseudo_box", "dpl"].map(Value::from).to_vec(),
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

/// One training run per (value, seed) of a single parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: SweepParam,
    #[serde(default)]
    pub values: Vec<Value>,
    #[serde(default)]
    pub base_config: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

/// Human-readable form of a sweep value, as written to the CSV.
pub fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl SweepSpec {
    pub fn new(parameter: SweepParam, base_config: TrainConfig) -> Self {
        Self {
            parameter,
            values: parameter.default_values(),
            base_config,
            seeds: default_seeds(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::json("sweep spec", e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidConfig("sweep values are empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("sweep seeds are empty".into()));
        }
        for v in &self.values {
            self.apply(v, self.seeds[0])?;
        }
        Ok(())
    }

    /// The run config of one grid point.
    pub fn apply(&self, value: &Value, seed: u64) -> Result<TrainConfig> {
        let mut cfg = self.base_config.clone().with_seed(seed);
        let bad = || {
            Error::InvalidConfig(format!(
                "value {value} is not valid for sweep parameter {}",
                self.parameter.name()
            ))
        };
        let num = || value.as_f64().ok_or_else(bad);
        let text = |v: &Value| -> Result<Value> { v.is_string().then(|| v.clone()).ok_or_else(bad) };
        match self.parameter {
            SweepParam::SigmaT => cfg.pipeline.sigma_t = num()?,
            SweepParam::SigmaNms => cfg.pipeline.sigma_nms = num()?,
            SweepParam::KPercent => cfg.pipeline.k_percent = num()?,
            SweepParam::WU => cfg.w_u = num()?,
            SweepParam::HnStrategy => {
                cfg.pipeline.hn_strategy =
                    serde_json::from_value::<HardNegativeStrategy>(text(value)?).map_err(|_| bad())?
            }
            SweepParam::Mode => {
                cfg.pipeline.mode = serde_json::from_value::<PipelineMode>(text(value)?).map_err(|_| bad())?
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every run config, values outer and seeds inner.
    pub fn configs(&self) -> Result<Vec<(Value, u64, TrainConfig)>> {
        let mut out = Vec::with_capacity(self.values.len() * self.seeds.len());
        for v in &self.values {
            for &s in &self.seeds {
                out.push((v.clone(), s, self.apply(v, s)?));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub seed: u64,
    #[serde(rename = "AP")]
    pub ap: Option<f64>,
    #[serde(rename = "AP50")]
    pub ap50: Option<f64>,
    #[serde(rename = "AP75")]
    pub ap75: Option<f64>,
    pub diverged: bool,
    pub config_hash: String,
    pub note: String,
}

impl SweepRow {
    fn new(param: SweepParam, value: &Value, rec: &RunRecord) -> Self {
        Self {
            param: param.name().to_string(),
            value: value_label(value),
            seed: rec.seed,
            ap: rec.ap,
            ap50: rec.ap50,
            ap75: rec.ap75,
            diverged: rec.diverged,
            config_hash: rec.config_hash.clone(),
            note: rec.note.clone(),
        }
    }
}

pub fn rows_to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::InvalidConfig(format!("csv encoding failed: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidConfig(format!("csv encoding failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Mean AP against value with per-seed points; failed runs are drawn as
/// boxed crosses at their AP (0 when aborted).
pub fn sweep_chart(spec: &SweepSpec, rows: &[SweepRow]) -> LineChart {
    let mut mean = Vec::new();
    let mut markers = Vec::new();
    for (i, v) in spec.values.iter().enumerate() {
        let x = i as f64;
        let label = value_label(v);
        let ok: Vec<f64> = rows
            .iter()
            .filter(|r| r.value == label && !r.diverged)
            .filter_map(|r| r.ap)
            .collect();
        if !ok.is_empty() {
            mean.push((x, ok.iter().sum::<f64>() / ok.len() as f64));
        }
        for r in rows.iter().filter(|r| r.value == label) {
            markers.push(Marker {
                x,
                y: r.ap.unwrap_or(0.0),
                kind: if r.diverged { MarkerKind::Failed } else { MarkerKind::Dot },
            });
        }
    }
    let mut series = Series::line("mean AP", mean);
    series.markers = markers;
    LineChart {
        title: format!("AP vs {}", spec.parameter.name()),
        x_label: spec.parameter.name().to_string(),
        y_label: "AP (%)".into(),
        series: vec![series],
        categorical_x: true,
        x_names: spec.values.iter().map(value_label).collect(),
    }
}

/// Run a sweep through `store` and write `sweep.csv`, `sweep.svg`,
/// `spec.json` and `manifest.json` into `out`.
pub fn run_sweep(spec: &SweepSpec, store: &RunStore, out: &Path) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let grid = spec.configs()?;
    let cfgs: Vec<TrainConfig> = grid.iter().map(|g| g.2.clone()).collect();
    let records = store.run_all(&cfgs)?;
    let rows: Vec<SweepRow> = grid
        .iter()
        .zip(&records)
        .map(|((v, _, _), rec)| SweepRow::new(spec.parameter, v, rec))
        .collect();

    let mut manifest = Manifest::new(format!("sweep {}", spec.parameter.name()));
    let spec_text = serde_json::to_string_pretty(spec).map_err(|e| Error::json("sweep spec", e))?;
    write_artifact(&mut manifest, out, "spec.json", "sweep spec", &spec_text)?;
    write_artifact(&mut manifest, out, "sweep.csv", "csv", &rows_to_csv(&rows)?)?;
    write_artifact(&mut manifest, out, "sweep.svg", "svg", &sweep_chart(spec, &rows).render())?;
    for (v, seed, cfg) in &grid {
        manifest.config(
            format!("{}={}/seed={seed}", spec.parameter.name(), value_label(v)),
            cfg.hash(),
        );
    }
    manifest.write(out)?;
    Ok(rows)
}
