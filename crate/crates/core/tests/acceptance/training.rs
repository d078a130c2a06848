//! Training-level criteria: the desk-scale echo, determinism and teacher freeze.

use std::time::Instant;

use imae_core::checkpoint::{file_digest, Checkpoint};
use imae_core::data::{load_dataset, DataConfig, Dataset, Split};
use imae_core::evalsep::{separability_report, SplitOptions};
use imae_core::trainer::{finetune, linear_probe, FinetuneConfig, Pretrainer, ProbeConfig};
use imae_core::{BackboneConfig, LossConfig, MixConfig, ParamStore, Phase, Profile, TrainConfig};

use crate::Verdict;

const ECHO_SEEDS: [u64; 3] = [0, 1, 2];
const ECHO_IMAGE: usize = 16;
const ECHO_TRAIN: usize = 5000;
const ECHO_VAL: usize = 1000;
const ECHO_BATCH: usize = 32;
const TEACHER_EPOCHS: u64 = 3;
const TEACHER_LR: f64 = 1e-2;
const IMAE_EPOCHS: u64 = 30;
const IMAE_LR: f64 = 3e-2;
const FINETUNE_EPOCHS: u64 = 5;
const SEPARABILITY_IMAGES: usize = 512;
const SEPARABILITY_LAMBDA: f64 = 1e-3;
const MIN_SUB_FALL: f64 = 0.40;
const PROBE_SLACK: f64 = 0.5;

struct SeedEcho {
    seed: u64,
    sub_fall: f64,
    cos_aft_distill: f64,
    cos_aft_plain: f64,
    finetune_dual: f64,
    finetune_sub_only: f64,
    probe_r0: f64,
    probe_r1: f64,
}

fn echo_model() -> BackboneConfig {
    BackboneConfig::from_profile(Profile::Micro, ECHO_IMAGE, 0.75)
}

fn imae_run<'a>(model: &BackboneConfig, data: &'a Dataset, teacher: &ParamStore, loss: LossConfig, r: f64, seed: u64) -> Pretrainer<'a> {
    let train = TrainConfig {
        base_lr: IMAE_LR,
        warmup: 1,
        epochs: IMAE_EPOCHS,
        batch: ECHO_BATCH,
        seed,
        ..TrainConfig::default()
    };
    let mix = MixConfig { same_class_ratio: Some(r), ..MixConfig::default() };
    let mut run = Pretrainer::new(Phase::ImaePretrain, model.clone(), train, mix, loss, data, Some(teacher.clone()))
        .expect("i-MAE run");
    run.run(None).expect("i-MAE pre-training");
    run
}

fn echo_seed(seed: u64, train: &Dataset, val: &Dataset, clock: &Instant) -> SeedEcho {
    let model = echo_model();
    let teacher_cfg = TrainConfig {
        base_lr: TEACHER_LR,
        warmup: 1,
        epochs: TEACHER_EPOCHS,
        batch: ECHO_BATCH,
        seed,
        ..TrainConfig::default()
    };
    let mut teacher = Pretrainer::new(
        Phase::TeacherPretrain,
        model.clone(),
        teacher_cfg,
        MixConfig::default(),
        LossConfig::default(),
        train,
        None,
    )
    .expect("teacher run");
    teacher.run(None).expect("teacher pre-training");
    let teacher = teacher.params;

    let split = SplitOptions { seed, ..SplitOptions::default() };
    let eval_mix = MixConfig::default();
    let separability = |student: &ParamStore| {
        separability_report(&model, student, &teacher, val, Some(&eval_mix), SEPARABILITY_IMAGES, SEPARABILITY_LAMBDA, split)
            .expect("separability")
            .cos_aft
    };
    let probe = |student: &ParamStore| {
        linear_probe(&model, student, train, val, &ProbeConfig { seed, ..ProbeConfig::default() })
            .expect("probe")
            .top1
    };
    let tune = |student: &ParamStore| {
        let cfg = FinetuneConfig { epochs: FINETUNE_EPOCHS, seed, ..FinetuneConfig::default() };
        finetune(&model, student, train, val, &cfg).expect("finetune").0.top1
    };
    let progress = |what: &str| eprintln!("  [echo seed {seed}, {:.0}s] {what}", clock.elapsed().as_secs_f64());

    let full = imae_run(&model, train, &teacher, LossConfig::default(), 0.0, seed);
    let sub = full.epoch_means(|r| r.recon_sub);
    let sub_fall = 1.0 - sub[sub.len() - 1] / sub[0];
    let cos_aft_distill = separability(&full.params);
    let probe_r0 = probe(&full.params);
    let finetune_dual = tune(&full.params);
    progress(&format!(
        "i-MAE: sub loss {:.3} -> {:.3}, cos_aft {cos_aft_distill:.3}, probe {probe_r0:.2}, finetune {finetune_dual:.2}",
        sub[0],
        sub[sub.len() - 1]
    ));

    let plain = imae_run(&model, train, &teacher, LossConfig { use_distill: false, ..LossConfig::default() }, 0.0, seed);
    let cos_aft_plain = separability(&plain.params);
    progress(&format!("without distillation: cos_aft {cos_aft_plain:.3}"));

    let sub_only = imae_run(&model, train, &teacher, LossConfig { dual_branch: false, ..LossConfig::default() }, 0.0, seed);
    let finetune_sub_only = tune(&sub_only.params);
    progress(&format!("subordinate only: finetune {finetune_sub_only:.2}"));

    let semantic = imae_run(&model, train, &teacher, LossConfig::default(), 1.0, seed);
    let probe_r1 = probe(&semantic.params);
    progress(&format!("same-class pairs: probe {probe_r1:.2}"));

    SeedEcho {
        seed,
        sub_fall,
        cos_aft_distill,
        cos_aft_plain,
        finetune_dual,
        finetune_sub_only,
        probe_r0,
        probe_r1,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Directional echo over three seeds: subordinate loss falls, distillation
/// improves separability, the dual branch beats subordinate-only finetuning,
/// and same-class pairing does not hurt linear probing.
pub fn desk_echo() -> Verdict {
    let clock = Instant::now();
    let dc = DataConfig {
        image_size: ECHO_IMAGE,
        num_train: ECHO_TRAIN,
        num_val: ECHO_VAL,
        ..DataConfig::default()
    };
    let train = load_dataset(&dc, Split::Train).expect("train split");
    let val = load_dataset(&dc, Split::Val).expect("val split");
    let seeds: Vec<SeedEcho> = ECHO_SEEDS.iter().map(|&s| echo_seed(s, &train, &val, &clock)).collect();

    let min_fall = seeds.iter().map(|s| s.sub_fall).fold(f64::INFINITY, f64::min);
    let cos_d = mean(seeds.iter().map(|s| s.cos_aft_distill));
    let cos_p = mean(seeds.iter().map(|s| s.cos_aft_plain));
    let ft_dual = mean(seeds.iter().map(|s| s.finetune_dual));
    let ft_sub = mean(seeds.iter().map(|s| s.finetune_sub_only));
    let probe_r0 = mean(seeds.iter().map(|s| s.probe_r0));
    let probe_r1 = mean(seeds.iter().map(|s| s.probe_r1));
    let r1_wins = seeds.iter().filter(|s| s.probe_r1 >= s.probe_r0).count();

    let a = min_fall >= MIN_SUB_FALL;
    let b = cos_d > cos_p;
    let c = ft_dual > ft_sub;
    let d = probe_r1 >= probe_r0 - PROBE_SLACK && r1_wins * 3 >= seeds.len() * 2;
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    for s in &seeds {
        eprintln!(
            "  [echo seed {}] fall {:.1}%, cos_aft {:.3} vs {:.3}, finetune {:.2} vs {:.2}, probe r=1 {:.2} vs r=0 {:.2}",
            s.seed,
            100.0 * s.sub_fall,
            s.cos_aft_distill,
            s.cos_aft_plain,
            s.finetune_dual,
            s.finetune_sub_only,
            s.probe_r1,
            s.probe_r0
        );
    }
    Verdict::new(
        a && b && c && d,
        format!(
            "(a) {} min sub-loss fall {:.1}% (need >= {:.0}%); (b) {} cos_aft {cos_d:.3} with vs {cos_p:.3} without distillation; \
             (c) {} finetune {ft_dual:.2} dual vs {ft_sub:.2} sub-only; (d) {} probe {probe_r1:.2} at r=1 vs {probe_r0:.2} at r=0, \
             r=1 ahead in {r1_wins}/{} seeds",
            mark(a),
            100.0 * min_fall,
            100.0 * MIN_SUB_FALL,
            mark(b),
            mark(c),
            mark(d),
            seeds.len()
        ),
    )
}

fn small_data() -> Dataset {
    let dc = DataConfig { image_size: 16, num_train: 256, ..DataConfig::default() };
    load_dataset(&dc, Split::Train).expect("synthetic data")
}

fn small_train(seed: u64, max_steps: u64) -> TrainConfig {
    TrainConfig {
        base_lr: 0.05,
        warmup: 1,
        epochs: 4,
        batch: 16,
        seed,
        max_steps: Some(max_steps),
        ..TrainConfig::default()
    }
}

fn small_teacher(data: &Dataset) -> ParamStore {
    let model = BackboneConfig::from_profile(Profile::Nano, 16, 0.75);
    let mut t = Pretrainer::new(
        Phase::TeacherPretrain,
        model,
        small_train(3, 16),
        MixConfig::default(),
        LossConfig::default(),
        data,
        None,
    )
    .expect("teacher");
    t.run(None).expect("teacher run");
    t.params
}

const DETERMINISM_STEPS: u64 = 50;
const RESUME_AT: u64 = 23;

/// Fixed-seed 50-step runs reproduce the metrics CSV byte for byte, and a run
/// interrupted through a serialized checkpoint ends in the same state.
pub fn determinism() -> Verdict {
    let data = small_data();
    let teacher = small_teacher(&data);
    let model = BackboneConfig::from_profile(Profile::Nano, 16, 0.75);
    let fresh = || {
        Pretrainer::new(
            Phase::ImaePretrain,
            model.clone(),
            small_train(5, DETERMINISM_STEPS),
            MixConfig::default(),
            LossConfig::default(),
            &data,
            Some(teacher.clone()),
        )
        .expect("run")
    };
    let mut first = fresh();
    first.run(None).expect("first run");
    let mut second = fresh();
    second.run(None).expect("second run");
    let csv_equal = first.metrics_csv().as_bytes() == second.metrics_csv().as_bytes();

    let mut head = fresh();
    head.run(Some(RESUME_AT)).expect("interrupted run");
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("mid.ckpt");
    head.checkpoint().save(&path).expect("save");
    let loaded = Checkpoint::load(&path).expect("load");
    let mut tail = fresh();
    tail.resume(&loaded).expect("resume");
    tail.run(None).expect("resumed run");

    let state_equal = tail.checkpoint() == first.checkpoint();
    let rows_equal = tail.metrics.as_slice() == &first.metrics[RESUME_AT as usize..];
    Verdict::new(
        csv_equal && state_equal && rows_equal && first.step == DETERMINISM_STEPS,
        format!(
            "{} steps: metrics CSV identical: {csv_equal}; resumed at step {RESUME_AT}: final state identical: {state_equal}, \
             later metric rows identical: {rows_equal}",
            first.step
        ),
    )
}

/// The teacher checkpoint file and the in-memory teacher are bit-identical
/// before and after an i-MAE pre-training run that distills from them.
pub fn teacher_freeze() -> Verdict {
    let data = small_data();
    let model = BackboneConfig::from_profile(Profile::Nano, 16, 0.75);
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("teacher.ckpt");
    Checkpoint::new(Phase::TeacherPretrain.as_str(), model.clone(), small_teacher(&data))
        .save(&path)
        .expect("save teacher");
    let file_before = file_digest(&path).expect("digest");
    let teacher = Checkpoint::load(&path).expect("load teacher").params;
    let params_before = teacher.digest();

    let mut run = Pretrainer::new(
        Phase::ImaePretrain,
        model,
        small_train(9, 32),
        MixConfig::default(),
        LossConfig::default(),
        &data,
        Some(teacher),
    )
    .expect("run");
    let student_before = run.params.digest();
    run.run(None).expect("i-MAE run");
    let trained = run.params.digest() != student_before;
    let params_after = run.teacher.as_ref().expect("teacher kept").digest();
    let file_after = file_digest(&path).expect("digest");
    Verdict::new(
        trained && file_before == file_after && params_before == params_after,
        format!(
            "{} steps (student changed: {trained}); file sha256 {}.. -> {}..; teacher parameter digest unchanged: {}",
            run.step,
            &file_before[..12],
            &file_after[..12],
            params_before == params_after
        ),
    )
}
