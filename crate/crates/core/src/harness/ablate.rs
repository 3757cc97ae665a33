use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudolabel::{HardNegativeStrategy, PipelineMode};
use crate::trainer::TrainConfig;

use super::manifest::{write_artifact, Manifest};
use super::runs::{RunRecord, RunStore};
use super::sweep::rows_to_csv;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Supervised, pseudo-box, DPL on all anchors and DPL with region
    /// division; classification only, then with the regression branch.
    Table1,
    /// Hard-negative strategies, each with and without regression.
    Table5,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "table1" => Ok(Preset::Table1),
            "table5" => Ok(Preset::Table5),
            other => Err(Error::InvalidConfig(format!(
                "unknown ablation preset {other:?} (expected table1 or table5)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Table1 => "table1",
            Preset::Table5 => "table5",
        }
    }
}

/// One row of an ablation table: its label and how it alters the base.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub region: String,
    pub reg: bool,
    pub config: TrainConfig,
}

fn row(label: &str, region: &str, reg: bool, config: TrainConfig) -> AblationRow {
    AblationRow {
        label: label.into(),
        region: region.into(),
        reg,
        config,
    }
}

/// The config matrix of a preset, relative to `base` (seed not yet set).
pub fn preset_rows(preset: Preset, base: &TrainConfig) -> Vec<AblationRow> {
    let with = |mode: PipelineMode, k: f64, hn: HardNegativeStrategy, reg: bool| {
        let mut c = base.clone();
        c.pipeline.mode = mode;
        c.pipeline.k_percent = k;
        c.pipeline.hn_strategy = hn;
        c.pipeline.reg_enabled = reg;
        c
    };
    let k = base.pipeline.k_percent;
    let sel = HardNegativeStrategy::Select;
    match preset {
        Preset::Table1 => {
            let mut sup = base.clone();
            sup.w_u = 0.0;
            vec![
                row("supervised", "-", false, sup),
                row("pseudo-box", "predicted positive", false, with(PipelineMode::PseudoBox, k, sel, false)),
                row("dpl-all", "all", false, with(PipelineMode::Dpl, 100.0, sel, false)),
                row("dpl-division", "division", false, with(PipelineMode::Dpl, k, sel, false)),
                row("pseudo-box+reg", "predicted positive", true, with(PipelineMode::PseudoBox, k, sel, true)),
                row("dpl-division+reg", "division", true, with(PipelineMode::Dpl, k, sel, true)),
            ]
        }
        Preset::Table5 => {
            let mut rows = Vec::new();
            for reg in [false, true] {
                for hn in [
                    HardNegativeStrategy::Suppress,
                    HardNegativeStrategy::Ignore,
                    HardNegativeStrategy::Select,
                ] {
                    let label = format!("{}{}", hn.name(), if reg { "+reg" } else { "" });
                    rows.push(row(&label, "division", reg, with(PipelineMode::Dpl, k, hn, reg)));
                }
            }
            rows
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(v: &[f64]) -> MeanSd {
    if v.is_empty() {
        return MeanSd::default();
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanSd { mean, sd }
}

/// Aggregated result of one ablation row. Aborted runs count as AP 0.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub label: String,
    pub region: String,
    pub reg: bool,
    pub runs: Vec<RunRecord>,
    pub ap: MeanSd,
    pub ap50: MeanSd,
    pub ap75: MeanSd,
}

impl AblationResult {
    pub fn ap50_per_seed(&self) -> Vec<f64> {
        self.runs.iter().map(RunRecord::ap50_or_zero).collect()
    }
}

#[derive(Serialize)]
struct ReportRow<'a> {
    row: &'a str,
    learning_region: &'a str,
    reg: bool,
    seeds: usize,
    diverged: usize,
    #[serde(rename = "AP")]
    ap: String,
    #[serde(rename = "AP50")]
    ap50: String,
    #[serde(rename = "AP75")]
    ap75: String,
    config_hashes: String,
}

#[derive(Serialize)]
struct RunRow<'a> {
    row: &'a str,
    seed: u64,
    #[serde(rename = "AP")]
    ap: Option<f64>,
    #[serde(rename = "AP50")]
    ap50: Option<f64>,
    #[serde(rename = "AP75")]
    ap75: Option<f64>,
    diverged: bool,
    config_hash: &'a str,
    note: &'a str,
}

fn pm(m: MeanSd) -> String {
    format!("{:.2} ± {:.2}", m.mean, m.sd)
}

/// Train every row of `preset` for every seed and write `report.csv`
/// (mean ± sd per row), `runs.csv` (one line per run) and the manifest.
pub fn run_ablation(
    preset: Preset,
    base: &TrainConfig,
    seeds: &[u64],
    store: &RunStore,
    out: &Path,
) -> Result<Vec<AblationResult>> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one seed".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let rows = preset_rows(preset, base);
    let mut cfgs = Vec::new();
    for r in &rows {
        for &s in seeds {
            cfgs.push(r.config.clone().with_seed(s));
        }
    }
    let records = store.run_all(&cfgs)?;
    let results: Vec<AblationResult> = rows
        .iter()
        .zip(records.chunks(seeds.len()))
        .map(|(r, recs)| {
            let pick = |f: fn(&RunRecord) -> Option<f64>| -> Vec<f64> {
                recs.iter().map(|x| f(x).unwrap_or(0.0)).collect()
            };
            AblationResult {
                label: r.label.clone(),
                region: r.region.clone(),
                reg: r.reg,
                runs: recs.to_vec(),
                ap: mean_sd(&pick(|x| x.ap)),
                ap50: mean_sd(&pick(|x| x.ap50)),
                ap75: mean_sd(&pick(|x| x.ap75)),
            }
        })
        .collect();

    let report: Vec<ReportRow> = results
        .iter()
        .map(|r| ReportRow {
            row: &r.label,
            learning_region: &r.region,
            reg: r.reg,
            seeds: r.runs.len(),
            diverged: r.runs.iter().filter(|x| x.diverged).count(),
            ap: pm(r.ap),
            ap50: pm(r.ap50),
            ap75: pm(r.ap75),
            config_hashes: r.runs.iter().map(|x| x.config_hash.as_str()).collect::<Vec<_>>().join(";"),
        })
        .collect();
    let runs: Vec<RunRow> = results
        .iter()
        .flat_map(|r| {
            r.runs.iter().map(move |x| RunRow {
                row: &r.label,
                seed: x.seed,
                ap: x.ap,
                ap50: x.ap50,
                ap75: x.ap75,
                diverged: x.diverged,
                config_hash: &x.config_hash,
                note: &x.note,
            })
        })
        .collect();

    let mut manifest = Manifest::new(format!("ablate {}", preset.name()));
    write_artifact(&mut manifest, out, "report.csv", "csv", &rows_to_csv(&report)?)?;
    write_artifact(&mut manifest, out, "runs.csv", "csv", &rows_to_csv(&runs)?)?;
    manifest.config("base", base.hash());
    for (i, cfg) in cfgs.iter().enumerate() {
        let row = &rows[i / seeds.len()].label;
        manifest.config(format!("{row}/seed={}", seeds[i % seeds.len()]), cfg.hash());
    }
    manifest.write(out)?;
    Ok(results)
}
