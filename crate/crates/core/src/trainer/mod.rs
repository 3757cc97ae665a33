//! Teacher-student training: burn-in, batch composition, combined loss,
//! SGD, EMA teacher, evaluation, metrics and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod eval;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{
    assign_targets, backward, forward, supervised_loss, ClassTargetKind, GridSpec, LossParts, ModelParams, Real,
    Weights,
};
use crate::error::{Error, Result};
use crate::geometry::ApSummary;
use crate::pseudolabel::{build_unsupervised_label, unsupervised_loss};
use crate::rng::{derive_seed, keyed_rng};
use crate::synthdata::{
    generate_scene, scene_seed, split_dataset, strong_augment, weak_augment, DatasetSplit, Scene,
};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{config_hash, DataConfig, EvalModel, Precision, Seeds, TrainConfig};
pub use eval::{detect, detect_all, evaluate, infer};

const KEY_LABELED_BATCH: u64 = 0xba7c4;
const KEY_UNLABELED_BATCH: u64 = 0xba7c5;
const KEY_LABELED_VIEW: u64 = 0x1ab;
const KEY_LABELED_STRONG: u64 = 0x1ab5;
const KEY_WEAK_VIEW: u64 = 0xeaa;
const KEY_STRONG_VIEW: u64 = 0x5e0;

pub const METRICS_HEADER: &str = "iter,L_s_cls,L_s_reg,L_u_cls,L_u_reg,total,AP,AP50,AP75";
pub const EVAL_HEADER: &str = "iter,model,AP,AP50,AP75";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: ModelParams,
    pub teacher: ModelParams,
    /// SGD momentum buffer, aligned with the parameter vector.
    pub momentum: Vec<f64>,
    /// Completed iterations.
    pub iteration: u64,
}

impl TrainState {
    /// Fresh student from the init stream; the teacher starts as a copy.
    pub fn new(cfg: &TrainConfig) -> Self {
        let student = ModelParams::init(&cfg.arch, cfg.seeds.init);
        Self {
            teacher: student.clone(),
            momentum: vec![0.0; student.values.len()],
            student,
            iteration: 0,
        }
    }
}

/// Training pool, labeled/unlabeled split and the cached validation set.
/// Training scenes are regenerated on demand from their seeds.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DataConfig,
    pub data_seed: u64,
    pub split: DatasetSplit,
    pub val: Vec<Scene>,
}

impl Dataset {
    pub fn new(config: &DataConfig, data_seed: u64) -> Result<Self> {
        config.generator.validate()?;
        let split = split_dataset(config.num_train, config.labeled_fraction, data_seed)?;
        let val = (config.num_train..config.num_train + config.num_val)
            .into_par_iter()
            .map(|id| generate_scene(scene_seed(data_seed, id), &config.generator))
            .collect();
        Ok(Self {
            config: config.clone(),
            data_seed,
            split,
            val,
        })
    }

    pub fn scene(&self, id: usize) -> Scene {
        generate_scene(scene_seed(self.data_seed, id), &self.config.generator)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSeeds {
    pub id: usize,
    pub weak: u64,
    pub strong: u64,
}

#[derive(Debug, Clone)]
pub struct LabeledView {
    pub seeds: ViewSeeds,
    pub view: Scene,
}

#[derive(Debug, Clone)]
pub struct UnlabeledView {
    pub seeds: ViewSeeds,
    pub weak: Scene,
    pub strong: Scene,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub iteration: u64,
    pub labeled: Vec<LabeledView>,
    pub unlabeled: Vec<UnlabeledView>,
}

fn draw_ids(pool: &[usize], count: usize, seed: u64, key: u64, iteration: u64) -> Vec<usize> {
    let mut rng = keyed_rng(seed, &[key, iteration]);
    if count <= pool.len() {
        sample(&mut rng, pool.len(), count).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..count).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// Batch for the step that starts at `iteration`. Labeled and unlabeled
/// draws use separate keyed streams, so dropping the unlabeled half leaves
/// the labeled half unchanged.
pub fn sample_batch(data: &Dataset, cfg: &TrainConfig, iteration: u64, with_unlabeled: bool) -> Result<Batch> {
    let labeled_ids = draw_ids(
        &data.split.labeled_ids,
        cfg.batch_labeled,
        cfg.seeds.data,
        KEY_LABELED_BATCH,
        iteration,
    );
    let labeled = labeled_ids
        .par_iter()
        .enumerate()
        .map(|(slot, &id)| {
            let seeds = ViewSeeds {
                id,
                weak: derive_seed(cfg.seeds.augment, &[KEY_LABELED_VIEW, iteration, slot as u64]),
                strong: derive_seed(cfg.seeds.augment, &[KEY_LABELED_STRONG, iteration, slot as u64]),
            };
            let scene = data.scene(id);
            let (weak, record) = weak_augment(&scene, seeds.weak);
            let view = if data.config.labeled_strong_aug {
                strong_augment(&scene, seeds.strong, &record, &data.config.strong_aug)
            } else {
                weak
            };
            LabeledView { seeds, view }
        })
        .collect();

    let mut unlabeled = Vec::new();
    if with_unlabeled && cfg.batch_unlabeled > 0 {
        if data.split.unlabeled_ids.is_empty() {
            return Err(Error::EmptyDataset("no unlabeled scenes for the unsupervised term"));
        }
        let ids = draw_ids(
            &data.split.unlabeled_ids,
            cfg.batch_unlabeled,
            cfg.seeds.data,
            KEY_UNLABELED_BATCH,
            iteration,
        );
        unlabeled = ids
            .par_iter()
            .enumerate()
            .map(|(slot, &id)| {
                let seeds = ViewSeeds {
                    id,
                    weak: derive_seed(cfg.seeds.augment, &[KEY_WEAK_VIEW, iteration, slot as u64]),
                    strong: derive_seed(cfg.seeds.augment, &[KEY_STRONG_VIEW, iteration, slot as u64]),
                };
                let scene = data.scene(id);
                let (weak, record) = weak_augment(&scene, seeds.weak);
                let strong = strong_augment(&scene, seeds.strong, &record, &data.config.strong_aug);
                UnlabeledView { seeds, weak, strong }
            })
            .collect();
    }
    Ok(Batch {
        iteration,
        labeled,
        unlabeled,
    })
}

/// Loss breakdown of one step. Components are batch means; `total` is
/// `L_s + w_u * L_u`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub s_cls: f64,
    pub s_reg: f64,
    pub u_cls: f64,
    pub u_reg: f64,
    pub w_u: f64,
    pub total: f64,
    /// Anchors whose IoU hit the clamp in either branch.
    pub clamped: usize,
}

impl StepLosses {
    pub fn supervised(&self) -> f64 {
        self.s_cls + self.s_reg
    }

    pub fn unsupervised(&self) -> f64 {
        self.u_cls + self.u_reg
    }
}

/// Mean loss and mean parameter gradient of a set of per-image results.
fn reduce(items: Vec<(LossParts, Option<Vec<f64>>)>, num_params: usize) -> (LossParts, Option<Vec<f64>>) {
    let n = items.len().max(1) as f64;
    let mut parts = LossParts::default();
    let mut grad: Option<Vec<f64>> = None;
    for (p, g) in items {
        parts.cls += p.cls;
        parts.reg += p.reg;
        parts.clamped += p.clamped;
        if let Some(g) = g {
            let acc = grad.get_or_insert_with(|| vec![0.0; num_params]);
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
    }
    parts.cls /= n;
    parts.reg /= n;
    if let Some(g) = grad.as_mut() {
        g.iter_mut().for_each(|v| *v /= n);
    }
    (parts, grad)
}

fn labeled_term<T: Real>(
    wts: &Weights<T>,
    grid: &GridSpec,
    views: &[LabeledView],
    gamma: f64,
    num_params: usize,
) -> Result<(LossParts, Vec<f64>)> {
    let items = views
        .par_iter()
        .map(|v| {
            let (out, cache) = forward(wts, &v.view.image)?;
            let target = assign_targets(&v.view.gts, grid, ClassTargetKind::IouQuality);
            let (parts, grad) = supervised_loss(&out, &target, grid, gamma)?;
            Ok((parts, Some(backward(wts, &cache, &grad)?)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (parts, grad) = reduce(items, num_params);
    Ok((parts, grad.unwrap_or_else(|| vec![0.0; num_params])))
}

fn unlabeled_term<T: Real>(
    student: &Weights<T>,
    teacher: &Weights<T>,
    grid: &GridSpec,
    views: &[UnlabeledView],
    cfg: &TrainConfig,
    need_grad: bool,
) -> Result<(LossParts, Option<Vec<f64>>)> {
    let num_params = student.values.len();
    let items = views
        .par_iter()
        .map(|v| {
            let (teacher_out, _) = forward(teacher, &v.weak.image)?;
            let label = build_unsupervised_label(&teacher_out, grid, &cfg.pipeline, Some(&v.weak.gts))?;
            let (out, cache) = forward(student, &v.strong.image)?;
            let (parts, grad) = unsupervised_loss(&out, &label, grid, &cfg.pipeline)?;
            let g = if need_grad {
                Some(backward(student, &cache, &grad)?)
            } else {
                None
            };
            Ok((parts, g))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce(items, num_params))
}

fn compute_step<T: Real>(
    state: &TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
    with_unlabeled: bool,
) -> Result<(StepLosses, Vec<f64>)> {
    let grid = cfg.arch.grid();
    let n = state.student.values.len();
    let student = Weights::<T>::from_params(&state.student);
    let (ls, mut grad) = labeled_term(&student, &grid, &batch.labeled, cfg.pipeline.gamma, n)?;
    let mut losses = StepLosses {
        s_cls: ls.cls,
        s_reg: ls.reg,
        w_u: cfg.w_u,
        clamped: ls.clamped,
        ..Default::default()
    };
    if with_unlabeled && !batch.unlabeled.is_empty() {
        let teacher = Weights::<T>::from_params(&state.teacher);
        let need_grad = cfg.w_u != 0.0;
        let (lu, gu) = unlabeled_term(&student, &teacher, &grid, &batch.unlabeled, cfg, need_grad)?;
        losses.u_cls = lu.cls;
        losses.u_reg = lu.reg;
        losses.clamped += lu.clamped;
        if let Some(gu) = gu {
            for (g, u) in grad.iter_mut().zip(&gu) {
                *g += cfg.w_u * u;
            }
        }
    }
    losses.total = losses.supervised() + cfg.w_u * losses.unsupervised();
    Ok((losses, grad))
}

fn dispatch_step(
    state: &TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
    with_unlabeled: bool,
) -> Result<(StepLosses, Vec<f64>)> {
    match cfg.precision {
        Precision::F32 => compute_step::<f32>(state, batch, cfg, with_unlabeled),
        Precision::F64 => compute_step::<f64>(state, batch, cfg, with_unlabeled),
    }
}

/// SGD with momentum and L2 weight decay on every parameter:
/// `v = mu v + g + wd w`, `w -= lr v`.
pub fn sgd_update(params: &mut ModelParams, momentum: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
    for ((w, v), &g) in params.values.iter_mut().zip(momentum.iter_mut()).zip(grad) {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
        *w -= cfg.lr * *v;
    }
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, alpha: f64) -> Result<()> {
    teacher.check_same_shape(student)?;
    for (t, &s) in teacher.values.iter_mut().zip(&student.values) {
        *t = alpha * *t + (1.0 - alpha) * s;
    }
    Ok(())
}

fn check_finite(state: &TrainState, losses: &StepLosses) -> Result<()> {
    if !losses.total.is_finite() {
        return Err(Error::NonFinite {
            what: "total loss",
            anchor: 0,
        });
    }
    if !state.student.is_finite() {
        return Err(Error::Diverged {
            iteration: state.iteration,
            reason: "non-finite student weights".into(),
        });
    }
    Ok(())
}

/// One supervised-only step on the labeled half of `batch`. The teacher is
/// left alone.
pub fn supervised_step(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig) -> Result<StepLosses> {
    let (losses, grad) = dispatch_step(state, batch, cfg, false)?;
    check_finite(state, &losses)?;
    sgd_update(&mut state.student, &mut state.momentum, &grad, cfg);
    state.iteration += 1;
    check_finite(state, &losses)?;
    Ok(losses)
}

/// One teacher-student step: the teacher labels the weak views, the student
/// learns from labeled images and strong views, SGD, then EMA.
pub fn ssod_train_step(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig) -> Result<StepLosses> {
    let (losses, grad) = dispatch_step(state, batch, cfg, true)?;
    check_finite(state, &losses)?;
    sgd_update(&mut state.student, &mut state.momentum, &grad, cfg);
    ema_update(&mut state.teacher, &state.student, cfg.ema_momentum)?;
    state.iteration += 1;
    check_finite(state, &losses)?;
    Ok(losses)
}

/// Supervised training for `burn_in_iters`, after which the teacher becomes
/// an exact copy of the student.
pub fn burn_in(data: &Dataset, cfg: &TrainConfig) -> Result<TrainState> {
    if data.split.labeled_ids.is_empty() {
        return Err(Error::EmptyDataset("no labeled scenes for burn-in"));
    }
    let mut state = TrainState::new(cfg);
    while state.iteration < cfg.burn_in_iters {
        let batch = sample_batch(data, cfg, state.iteration, false)?;
        supervised_step(&mut state, &batch, cfg)?;
    }
    state.teacher = state.student.clone();
    Ok(state)
}

/// Teacher and student AP at one iteration. During burn-in the teacher is
/// not yet defined and both fields hold the student's score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: u64,
    pub teacher: ApSummary,
    pub student: ApSummary,
}

impl EvalRecord {
    pub fn select(&self, model: EvalModel) -> ApSummary {
        match model {
            EvalModel::Teacher => self.teacher,
            EvalModel::Student => self.student,
        }
    }
}

/// Drives a run: the data, the config and one step at a time.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub data: Dataset,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let data = Dataset::new(&cfg.data, cfg.seeds.data)?;
        if data.split.labeled_ids.is_empty() {
            return Err(Error::EmptyDataset("no labeled scenes"));
        }
        Ok(Self { cfg, data })
    }

    pub fn init_state(&self) -> TrainState {
        TrainState::new(&self.cfg)
    }

    pub fn in_burn_in(&self, state: &TrainState) -> bool {
        state.iteration < self.cfg.burn_in_iters
    }

    pub fn batch(&self, iteration: u64) -> Result<Batch> {
        let ssod = iteration >= self.cfg.burn_in_iters;
        sample_batch(&self.data, &self.cfg, iteration, ssod && self.cfg.w_u > 0.0)
    }

    /// Advance one iteration. Burn-in steps are supervised; the teacher is
    /// copied from the student when burn-in ends. With `w_u = 0` no
    /// unlabeled images are drawn and the logged `L_u` is 0.
    pub fn step(&self, state: &mut TrainState) -> Result<(Batch, Result<StepLosses>)> {
        let batch = self.batch(state.iteration)?;
        let result = if self.in_burn_in(state) {
            let r = supervised_step(state, &batch, &self.cfg);
            if r.is_ok() && state.iteration == self.cfg.burn_in_iters {
                state.teacher = state.student.clone();
            }
            r
        } else {
            ssod_train_step(state, &batch, &self.cfg)
        };
        Ok((batch, result))
    }

    pub fn evaluate(&self, state: &TrainState) -> Result<EvalRecord> {
        let p = self.cfg.precision;
        let student = evaluate(&state.student, &self.data.val, p)?;
        let teacher = if self.in_burn_in(state) {
            student
        } else {
            evaluate(&state.teacher, &self.data.val, p)?
        };
        Ok(EvalRecord {
            iteration: state.iteration,
            teacher,
            student,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub final_eval: EvalRecord,
    pub evals: Vec<EvalRecord>,
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub seconds: f64,
}

impl TrainOutcome {
    pub fn final_ap(&self, model: EvalModel) -> ApSummary {
        self.final_eval.select(model)
    }
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    iteration: u64,
    error: String,
    labeled: Vec<&'a ViewSeeds>,
    unlabeled: Vec<&'a ViewSeeds>,
    losses: Option<StepLosses>,
}

fn pct(v: f64) -> String {
    format!("{:.4}", 100.0 * v)
}

fn metrics_row(iter: u64, l: &StepLosses, ap: Option<ApSummary>) -> String {
    let mut s = format!(
        "{iter},{},{},{},{},{}",
        l.s_cls, l.s_reg, l.u_cls, l.u_reg, l.total
    );
    match ap {
        Some(a) => write!(s, ",{},{},{}", pct(a.ap), pct(a.ap50), pct(a.ap75)).unwrap(),
        None => s.push_str(",,,"),
    }
    s
}

fn eval_rows(r: &EvalRecord) -> String {
    let mut s = String::new();
    for (name, a) in [("teacher", r.teacher), ("student", r.student)] {
        writeln!(s, "{},{name},{},{},{}", r.iteration, pct(a.ap), pct(a.ap50), pct(a.ap75)).unwrap();
    }
    s
}

/// Keep the header and rows whose leading iteration is `<= upto`.
fn truncate_csv(path: &Path, header: &str, upto: u64) -> Result<String> {
    let mut out = format!("{header}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let it = line.split(',').next().and_then(|v| v.parse::<u64>().ok());
            if it.is_some_and(|it| it <= upto) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

fn is_eval_iter(cfg: &TrainConfig, iter: u64) -> bool {
    iter % cfg.eval_interval == 0 || iter == cfg.total_iters
}

/// Drop the evaluation logged at iteration `it` by an earlier, shorter run
/// whose final iteration it was, so resumed logs match an unbroken run.
fn drop_eval_at(metrics: &mut String, eval_csv: &mut String, it: u64) {
    let at = |line: &str| line.split(',').next() == Some(it.to_string().as_str());
    let mut m = String::with_capacity(metrics.len());
    for line in metrics.lines() {
        if at(line) {
            let fields: Vec<&str> = line.split(',').collect();
            let keep = fields.len().saturating_sub(3);
            m.push_str(&fields[..keep].join(","));
            m.push_str(",,,");
        } else {
            m.push_str(line);
        }
        m.push('\n');
    }
    *metrics = m;
    *eval_csv = eval_csv.lines().filter(|l| !at(l)).map(|l| format!("{l}\n")).collect();
}

/// Full run into `out_dir`: `config.json`, `metrics.csv` (one row per
/// iteration, AP columns filled at eval iterations, in percent),
/// `eval.csv` (teacher and student) and `checkpoint.dtck`. With `resume`
/// the run continues from that checkpoint and keeps earlier metric rows.
///
/// A non-finite loss aborts with [`Error::Diverged`] after writing
/// `diverged_batch.json`.
pub fn train(cfg: &TrainConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    let start = Instant::now();
    let trainer = Trainer::new(cfg.clone())?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_path = out_dir.join("config.json");
    fs::write(&cfg_path, cfg.to_json()).map_err(|e| Error::io(&cfg_path, e))?;

    let mut state = match resume {
        Some(p) => {
            let s = load_checkpoint(p)?;
            if s.student.arch != cfg.arch {
                return Err(Error::ArchMismatch(format!("{} was trained with {:?}", p.display(), s.student.arch)));
            }
            if s.iteration > cfg.total_iters {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint is at iteration {}, past total_iters {}",
                    s.iteration, cfg.total_iters
                )));
            }
            s
        }
        None => trainer.init_state(),
    };
    if state.iteration == 0 && cfg.burn_in_iters == 0 {
        state.teacher = state.student.clone();
    }

    let metrics_path = out_dir.join("metrics.csv");
    let eval_path = out_dir.join("eval.csv");
    let mut metrics = truncate_csv(&metrics_path, METRICS_HEADER, state.iteration)?;
    let mut eval_csv = truncate_csv(&eval_path, EVAL_HEADER, state.iteration)?;
    if resume.is_some() && state.iteration > 0 && !is_eval_iter(cfg, state.iteration) {
        drop_eval_at(&mut metrics, &mut eval_csv, state.iteration);
    }
    let mut evals = Vec::new();
    let flush = |metrics: &str, eval_csv: &str| -> Result<()> {
        fs::write(&metrics_path, metrics).map_err(|e| Error::io(&metrics_path, e))?;
        fs::write(&eval_path, eval_csv).map_err(|e| Error::io(&eval_path, e))
    };

    while state.iteration < cfg.total_iters {
        let (batch, result) = trainer.step(&mut state)?;
        let losses = match result {
            Ok(l) => l,
            Err(e) => {
                let dump = DivergenceDump {
                    iteration: batch.iteration,
                    error: e.to_string(),
                    labeled: batch.labeled.iter().map(|v| &v.seeds).collect(),
                    unlabeled: batch.unlabeled.iter().map(|v| &v.seeds).collect(),
                    losses: None,
                };
                let p = out_dir.join("diverged_batch.json");
                let text = serde_json::to_string_pretty(&dump).map_err(|e| Error::json("divergence dump", e))?;
                fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
                flush(&metrics, &eval_csv)?;
                return Err(match e {
                    Error::Diverged { .. } => e,
                    other => Error::Diverged {
                        iteration: batch.iteration,
                        reason: other.to_string(),
                    },
                });
            }
        };
        let it = state.iteration;
        let ap = if is_eval_iter(cfg, it) {
            let r = trainer.evaluate(&state)?;
            eval_csv.push_str(&eval_rows(&r));
            log::info!(
                "iter {it}: loss {:.4} (s {:.4}, u {:.4}) AP50 teacher {:.2} student {:.2} [{:.0}s]",
                losses.total,
                losses.supervised(),
                losses.unsupervised(),
                100.0 * r.teacher.ap50,
                100.0 * r.student.ap50,
                start.elapsed().as_secs_f64()
            );
            evals.push(r);
            Some(r.select(cfg.eval_model))
        } else {
            None
        };
        writeln!(metrics, "{}", metrics_row(it, &losses, ap)).unwrap();
        if cfg.checkpoint_interval > 0 && it % cfg.checkpoint_interval == 0 {
            save_checkpoint(&state, &out_dir.join(format!("checkpoint_{it:06}.dtck")))?;
            flush(&metrics, &eval_csv)?;
        }
    }
    flush(&metrics, &eval_csv)?;
    let checkpoint = out_dir.join("checkpoint.dtck");
    save_checkpoint(&state, &checkpoint)?;
    let final_eval = match evals.last() {
        Some(r) if r.iteration == state.iteration => *r,
        _ => trainer.evaluate(&state)?,
    };
    Ok(TrainOutcome {
        state,
        final_eval,
        evals,
        out_dir: out_dir.to_path_buf(),
        checkpoint,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.data.num_train = 20;
        cfg.data.num_val = 4;
        cfg.batch_labeled = 2;
        cfg.batch_unlabeled = 2;
        cfg.burn_in_iters = 2;
        cfg.total_iters = 4;
        cfg.eval_interval = 2;
        cfg
    }

    #[test]
    fn ema_examples() {
        let arch = crate::detector::ArchConfig::default();
        let mut t = ModelParams::zeros(&arch);
        t.values.fill(1.0);
        let s = ModelParams::zeros(&arch);
        let mut t1 = t.clone();
        ema_update(&mut t1, &s, 0.9).unwrap();
        assert!(t1.values.iter().all(|&v| v == 0.9));
        let mut t0 = t.clone();
        ema_update(&mut t0, &s, 0.0).unwrap();
        assert_eq!(t0, s);
        let mut tt = t.clone();
        ema_update(&mut tt, &s, 1.0).unwrap();
        assert_eq!(tt, t);
    }

    #[test]
    fn ema_rejects_other_arch() {
        let a = crate::detector::ArchConfig::default();
        let b = crate::detector::ArchConfig {
            head_channels: 16,
            ..a.clone()
        };
        let mut t = ModelParams::zeros(&a);
        assert!(ema_update(&mut t, &ModelParams::zeros(&b), 0.5).is_err());
    }

    #[test]
    fn burn_in_copies_student() {
        let cfg = tiny();
        let data = Dataset::new(&cfg.data, cfg.seeds.data).unwrap();
        let s = burn_in(&data, &cfg).unwrap();
        assert_eq!(s.iteration, 2);
        assert_eq!(s.teacher, s.student);
        let zero = TrainConfig {
            burn_in_iters: 0,
            ..cfg.clone()
        };
        let s0 = burn_in(&data, &zero).unwrap();
        assert_eq!(s0.teacher, ModelParams::init(&cfg.arch, cfg.seeds.init));
    }

    #[test]
    fn batches_are_keyed_by_iteration() {
        let cfg = tiny();
        let data = Dataset::new(&cfg.data, cfg.seeds.data).unwrap();
        let a = sample_batch(&data, &cfg, 7, true).unwrap();
        let b = sample_batch(&data, &cfg, 7, false).unwrap();
        let ids = |x: &Batch| x.labeled.iter().map(|v| v.seeds.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        assert!(b.unlabeled.is_empty());
        assert_eq!(a.unlabeled.len(), 2);
        for v in &a.unlabeled {
            assert!(data.split.unlabeled_ids.contains(&v.seeds.id));
            assert_eq!(v.weak.gts, v.strong.gts);
        }
    }

    #[test]
    fn loss_accounting() {
        let cfg = TrainConfig { w_u: 2.5, ..tiny() };
        let trainer = Trainer::new(cfg.clone()).unwrap();
        let mut state = burn_in(&trainer.data, &cfg).unwrap();
        let batch = trainer.batch(state.iteration).unwrap();
        let l = ssod_train_step(&mut state, &batch, &cfg).unwrap();
        assert!((l.s_cls + l.s_reg + 2.5 * (l.u_cls + l.u_reg) - l.total).abs() < 1e-9);
        assert!(l.u_cls > 0.0);
    }

    #[test]
    fn train_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let out = train(&tiny(), dir.path(), None).unwrap();
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let lines: Vec<&str> = metrics.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 5);
        assert!(lines[2].split(',').nth(7).is_some_and(|v| !v.is_empty()));
        assert!(lines[1].ends_with(",,,"));
        assert_eq!(out.state.iteration, 4);
        assert!(dir.path().join("checkpoint.dtck").exists());
        assert_eq!(
            std::fs::read_to_string(dir.path().join("eval.csv")).unwrap().lines().count(),
            1 + 2 * 2
        );
    }
}
