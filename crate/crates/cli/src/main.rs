use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dplab::harness::{self, analysis, Preset, RunStore, SweepSpec, TeacherSource};
use dplab::trainer::{load_checkpoint, train, TrainConfig};
use dplab::{Error, Result};

#[derive(Parser)]
#[command(name = "dplab", version, about = "Dense pseudo-label detection lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config (train config; a sweep spec for `sweep`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Run seed; derives the data, augmentation and init seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Export the dataset a config defines.
    Generate(Common),
    /// Train one model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint's teacher and student.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Exported split sidecar (`<split>.json`); default: the config's validation set.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// One training run per (value, seed) of a sweep spec.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Run store; default `<out>/runs`.
        #[arg(long)]
        runs: Option<PathBuf>,
    },
    /// FP and FN counts of a teacher against the score threshold.
    AnalyzeFpfn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[arg(long, default_value_t = analysis::FPFN_SAMPLE)]
        images: usize,
    },
    /// Pseudo-box versus ground-truth label assignment.
    AnalyzeAssignment {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint; omit together with `--oracle` to use the
        /// ground truth as predictions.
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        sigma_t: Option<f64>,
        #[arg(long)]
        sigma_nms: Option<f64>,
        /// Box shifts in pixels.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        noise: Vec<f64>,
        #[arg(long, default_value_t = 200)]
        images: usize,
    },
    /// Run an ablation preset (table1 or table5).
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: String,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        runs: Option<PathBuf>,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn train_config(c: &Common) -> Result<TrainConfig> {
    let cfg = match &c.config {
        Some(p) => TrainConfig::from_json(&read(p)?)?,
        None => TrainConfig::default(),
    };
    Ok(match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let m = harness::generate(&train_config(&c)?, &c.out)?;
            println!("wrote {} artifacts to {}", m.artifacts.len(), c.out.display());
        }
        Command::Train { common: c, resume } => {
            let cfg = train_config(&c)?;
            let out = train(&cfg, &c.out, resume.as_deref())?;
            let mut manifest = harness::Manifest::new("train");
            for (name, kind) in [
                ("config.json", "config"),
                ("metrics.csv", "csv"),
                ("eval.csv", "csv"),
                ("checkpoint.dtck", "checkpoint"),
            ] {
                manifest.add(&c.out, &c.out.join(name), kind)?;
            }
            manifest.config("train_config", cfg.hash());
            manifest.write(&c.out)?;
            let a = out.final_ap(cfg.eval_model);
            println!(
                "iteration {}: AP {:.2} AP50 {:.2} AP75 {:.2} ({:.0}s)",
                out.state.iteration,
                100.0 * a.ap,
                100.0 * a.ap50,
                100.0 * a.ap75,
                out.seconds
            );
        }
        Command::Eval {
            common: c,
            checkpoint,
            dataset,
        } => {
            let r = harness::eval_checkpoint(&checkpoint, &train_config(&c)?, dataset.as_deref(), &c.out)?;
            println!(
                "teacher AP {:.2} AP50 {:.2} AP75 {:.2} | student AP {:.2} AP50 {:.2} AP75 {:.2}",
                r.teacher[0], r.teacher[1], r.teacher[2], r.student[0], r.student[1], r.student[2]
            );
        }
        Command::Sweep { common: c, runs } => {
            let path = c
                .config
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("sweep needs --config SPEC".into()))?;
            let mut spec = SweepSpec::from_json(&read(path)?)?;
            if let Some(s) = c.seed {
                spec.seeds = vec![s];
            }
            let store = RunStore::new(runs.unwrap_or_else(|| c.out.join("runs")));
            let rows = harness::run_sweep(&spec, &store, &c.out)?;
            let failed = rows.iter().filter(|r| r.diverged).count();
            println!("{} runs, {failed} flagged; see {}", rows.len(), c.out.join("sweep.csv").display());
        }
        Command::AnalyzeFpfn {
            common: c,
            checkpoint,
            dataset,
            thresholds,
            images,
        } => {
            let cfg = train_config(&c)?;
            let state = load_checkpoint(&checkpoint)?;
            let scenes = analysis::load_scenes(dataset.as_deref(), &cfg, images)?;
            let thresholds = thresholds.unwrap_or_else(analysis::default_thresholds);
            let rows = harness::analyze_fpfn(&state.teacher, &scenes, &thresholds, &cfg, &c.out)?;
            for r in rows {
                println!("threshold {:.2}: FP {} FN {} (GT {})", r.threshold, r.fp, r.fn_, r.gt);
            }
        }
        Command::AnalyzeAssignment {
            common: c,
            checkpoint,
            oracle,
            dataset,
            sigma_t,
            sigma_nms,
            noise,
            images,
        } => {
            let cfg = train_config(&c)?;
            let mut pipeline = cfg.pipeline.clone();
            pipeline.sigma_t = sigma_t.unwrap_or(pipeline.sigma_t);
            pipeline.sigma_nms = sigma_nms.unwrap_or(pipeline.sigma_nms);
            pipeline.validate()?;
            let scenes = analysis::load_scenes(dataset.as_deref(), &cfg, images)?;
            let state = match (&checkpoint, oracle) {
                (Some(p), false) => Some(load_checkpoint(p)?),
                _ => None,
            };
            let source = match &state {
                Some(s) => TeacherSource::Model(&s.teacher, cfg.precision),
                None => TeacherSource::Oracle,
            };
            let seed = c.seed.unwrap_or(0);
            for s in harness::analyze_assignment(source, &scenes, &pipeline, &noise, seed, &c.out)? {
                let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
                println!(
                    "noise {} px: mask precision {} recall {} IoU {}",
                    s.noise_px,
                    f(s.mask_precision),
                    f(s.mask_recall),
                    f(s.mask_iou)
                );
            }
        }
        Command::Ablate {
            common: c,
            preset,
            seeds,
            runs,
        } => {
            let preset = Preset::parse(&preset)?;
            let base = train_config(&c)?;
            let seeds = c.seed.map_or(seeds, |s| vec![s]);
            let store = RunStore::new(runs.unwrap_or_else(|| c.out.join("runs")));
            for r in harness::run_ablation(preset, &base, &seeds, &store, &c.out)? {
                println!(
                    "{:18} AP {:6.2} ± {:4.2}  AP50 {:6.2} ± {:4.2}",
                    r.label, r.ap.mean, r.ap.sd, r.ap50.mean, r.ap50.sd
                );
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "config" => 2,
        "data" => 3,
        "io" => 4,
        "checkpoint" => 5,
        "numeric" => 6,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
