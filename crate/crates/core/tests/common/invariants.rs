//! Loss identities and training-framework invariants, measured so the
//! regular tests and the acceptance report share one implementation.

use std::path::Path;

use dplab::detector::loss::{qfl, qfl_with_grad};
use dplab::detector::{forward, ArchConfig, ModelParams, Weights};
use dplab::pseudolabel::{build_dpl, unsupervised_cls_loss, HardNegativeStrategy, PipelineConfig};
use dplab::synthdata::{generate_scene, GenConfig};
use dplab::trainer::checkpoint::{decode_checkpoint, encode_checkpoint};
use dplab::trainer::{
    ema_update, load_checkpoint, sample_batch, save_checkpoint, supervised_step, train, Dataset, TrainConfig,
    TrainState, Trainer,
};

/// Textbook focal loss on a probability.
fn focal_ref(p: f64, positive: bool, gamma: f64) -> f64 {
    if positive {
        -(1.0 - p).powf(gamma) * p.ln()
    } else {
        -p.powf(gamma) * (1.0 - p).ln()
    }
}

/// ln(sigmoid(x)) without cancellation.
fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

/// Focal loss on a logit, with both log terms taken in log space.
fn focal_ref_logit(x: f64, positive: bool, gamma: f64) -> f64 {
    let (lp, lq) = (log_sigmoid(x), log_sigmoid(-x));
    if positive {
        -lq.exp().powf(gamma) * lp
    } else {
        -lp.exp().powf(gamma) * lq
    }
}

/// Largest |QFL - FL| over a logit grid, binary targets and several
/// gammas: once on shared probabilities, once from logits against a
/// log-space reference.
pub fn qfl_vs_focal_max_diff() -> f64 {
    let mut worst: f64 = 0.0;
    for i in -300..=300 {
        let x = i as f64 / 25.0;
        let p = 1.0 / (1.0 + (-x).exp());
        for gamma in [0.0, 0.5, 1.0, 2.0, 3.0] {
            for positive in [false, true] {
                let y = if positive { 1.0 } else { 0.0 };
                worst = worst.max((qfl(p, y, gamma) - focal_ref(p, positive, gamma)).abs());
                let (l, _) = qfl_with_grad(x, y, gamma);
                worst = worst.max((l - focal_ref_logit(x, positive, gamma)).abs());
            }
        }
    }
    worst
}

/// Largest |QFL(p, y)| with the target equal to the prediction, including
/// saturated predictions of exactly 0 and 1.
pub fn qfl_at_target_max() -> f64 {
    let mut worst: f64 = 0.0;
    let logits = (-400..=400).map(|i| i as f64 / 20.0).chain([-800.0, 800.0]);
    for x in logits {
        let y = dplab::detector::grid::sigmoid(x);
        for gamma in [0.5, 1.0, 2.0, 3.0] {
            worst = worst.max(qfl_with_grad(x, y, gamma).0.abs());
        }
    }
    worst
}

/// Unsupervised classification loss of a student whose output equals the
/// teacher's, with the learning region covering every anchor.
pub fn unsup_cls_loss_at_teacher(seed: u64) -> f64 {
    let arch = ArchConfig::default();
    let scene = generate_scene(seed, &GenConfig::default());
    let params = ModelParams::init(&arch, seed);
    let (out, _) = forward(&Weights::<f64>::from_params(&params), &scene.image).unwrap();
    let cfg = PipelineConfig {
        k_percent: 100.0,
        hn_strategy: HardNegativeStrategy::Select,
        ..PipelineConfig::default()
    };
    let dpl = build_dpl(&out, &arch.grid(), &cfg, None).unwrap();
    unsupervised_cls_loss(&out, &dpl, cfg.gamma).unwrap().0
}

/// A small but complete run: 64x64 images, tiny batches.
pub fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.arch.image_height = 64;
    cfg.arch.image_width = 64;
    cfg.data.generator.height = 64;
    cfg.data.generator.width = 64;
    cfg.data.generator.max_size = 28.0;
    cfg.data.num_train = 40;
    cfg.data.num_val = 8;
    cfg.batch_labeled = 2;
    cfg.batch_unlabeled = 2;
    cfg.burn_in_iters = 20;
    cfg.total_iters = 100;
    cfg.eval_interval = 50;
    cfg
}

/// Whether SS-OD training with `w_u = 0` reproduces plain supervised
/// training bit for bit, student and momentum, at every iteration.
pub fn w_u_zero_matches_supervised(iters: u64) -> bool {
    let cfg = TrainConfig {
        w_u: 0.0,
        burn_in_iters: 5,
        total_iters: iters,
        ..tiny_config()
    };
    let trainer = Trainer::new(cfg.clone()).unwrap();
    let data = Dataset::new(&cfg.data, cfg.seeds.data).unwrap();
    let mut ssod = trainer.init_state();
    let mut sup = TrainState::new(&cfg);
    for _ in 0..iters {
        let (_, r) = trainer.step(&mut ssod).unwrap();
        r.unwrap();
        let batch = sample_batch(&data, &cfg, sup.iteration, false).unwrap();
        supervised_step(&mut sup, &batch, &cfg).unwrap();
        if ssod.student.values.iter().zip(&sup.student.values).any(|(a, b)| a.to_bits() != b.to_bits())
            || ssod.momentum.iter().zip(&sup.momentum).any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return false;
        }
    }
    true
}

/// Largest deviation of ||t_{k+1} - s|| / ||t_k - s|| from `alpha` while
/// the teacher tracks a frozen student.
pub fn ema_ratio_max_dev(alpha: f64, steps: usize) -> f64 {
    let arch = ArchConfig::default();
    let student = ModelParams::init(&arch, 1);
    let mut teacher = ModelParams::init(&arch, 2);
    let dist = |t: &ModelParams| {
        t.values
            .iter()
            .zip(&student.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut prev = dist(&teacher);
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        ema_update(&mut teacher, &student, alpha).unwrap();
        let d = dist(&teacher);
        worst = worst.max((d / prev - alpha).abs());
        prev = d;
    }
    worst
}

/// Encode, decode and re-encode a trained state; true when all three
/// agree bit for bit, and the file round trip too.
pub fn checkpoint_round_trip(dir: &Path) -> bool {
    let cfg = TrainConfig {
        total_iters: 25,
        ..tiny_config()
    };
    let out = train(&cfg, &dir.join("ckpt_run"), None).unwrap();
    let bytes = encode_checkpoint(&out.state);
    let back = decode_checkpoint(&bytes).unwrap();
    let path = dir.join("state.dtck");
    save_checkpoint(&back, &path).unwrap();
    let from_file = load_checkpoint(&path).unwrap();
    let bits = |s: &TrainState| {
        s.student
            .values
            .iter()
            .chain(&s.teacher.values)
            .chain(&s.momentum)
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    back == out.state
        && bits(&back) == bits(&out.state)
        && from_file == out.state
        && encode_checkpoint(&from_file) == bytes
        && std::fs::read(&path).unwrap() == bytes
}

/// Train `iters` iterations straight through, and again with a stop at
/// `stop` and a resume; compare the final states and the metric logs.
pub fn resume_matches_unbroken(dir: &Path, iters: u64, stop: u64) -> bool {
    let cfg = TrainConfig {
        total_iters: iters,
        ..tiny_config()
    };
    let full = train(&cfg, &dir.join("full"), None).unwrap();
    let first = TrainConfig {
        total_iters: stop,
        ..cfg.clone()
    };
    let split_dir = dir.join("split");
    train(&first, &split_dir, None).unwrap();
    let resumed = train(&cfg, &split_dir, Some(&split_dir.join("checkpoint.dtck"))).unwrap();
    let read = |d: &Path, f: &str| std::fs::read_to_string(d.join(f)).unwrap();
    resumed.state == full.state
        && encode_checkpoint(&resumed.state) == encode_checkpoint(&full.state)
        && read(&split_dir, "metrics.csv") == read(&dir.join("full"), "metrics.csv")
        && read(&split_dir, "eval.csv") == read(&dir.join("full"), "eval.csv")
}

/// Over a short SS-OD run, whether every teacher update is exactly the
/// EMA of the previous teacher toward the new student, so no gradient
/// ever reaches the teacher.
pub fn teacher_only_moves_by_ema(iters: u64) -> bool {
    let cfg = TrainConfig {
        burn_in_iters: 3,
        total_iters: iters,
        ..tiny_config()
    };
    let trainer = Trainer::new(cfg.clone()).unwrap();
    let mut state = trainer.init_state();
    while state.iteration < iters {
        let before = state.teacher.clone();
        let burn_in = trainer.in_burn_in(&state);
        trainer.step(&mut state).unwrap().1.unwrap();
        if burn_in {
            continue;
        }
        let mut want = before;
        ema_update(&mut want, &state.student, cfg.ema_momentum).unwrap();
        if want != state.teacher {
            return false;
        }
    }
    true
}
