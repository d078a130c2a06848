use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use imae_core::checkpoint::Checkpoint;
use imae_core::data::{load_dataset, Split};
use imae_core::evalsep::{collect_features, report_from_features, reports_csv, reports_table, LassoOptions, SplitOptions};
use imae_core::trainer::{finetune, linear_probe, Pretrainer};
use imae_core::{BackboneConfig, Dataset, ExperimentConfig, ImaeError, MaskSpec, Phase, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::grid::{reconstruction_rows, render_grid, summaries, COLUMNS};
use crate::manifest::Manifest;
use crate::plots::{encoder_weights, heatmap, matrix_csv, same_architecture, Histogram};

#[derive(Debug, Parser)]
#[command(name = "imae", version, about = "Interactive masked autoencoders: pre-training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML experiment configuration; every key has a default.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Pre-train the vanilla MAE teacher on unmixed images.
    PretrainTeacher,
    /// Pre-train i-MAE on mixed pairs (needs `paths.teacher` with distillation).
    PretrainImae,
    /// Finetune the encoder of `paths.ckpt` with a linear classifier and Mixup.
    Finetune,
    /// Linear probe on frozen features of `paths.ckpt`.
    Probe,
    /// Separability of the subordinate features of `paths.ckpt` against `paths.teacher`.
    SepReport,
    /// Reconstruction grid over the `reconstruct.alphas` mix factors.
    Reconstruct,
    /// Weight histograms of `paths.ckpt` vs `paths.ckpt_b` and attention heat maps.
    Plots,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::PretrainTeacher => "pretrain-teacher",
            Command::PretrainImae => "pretrain-imae",
            Command::Finetune => "finetune",
            Command::Probe => "probe",
            Command::SepReport => "sep-report",
            Command::Reconstruct => "reconstruct",
            Command::Plots => "plots",
        }
    }
}

/// Run directory of a command: `<out.dir>/<command>`.
pub fn run_dir(cfg: &ExperimentConfig, command: Command) -> PathBuf {
    cfg.out_dir().join(command.name())
}

/// Load the configuration and run one command; returns a short summary for stdout.
pub fn execute(cli: &Cli) -> Result<String> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let dir = run_dir(&cfg, cli.command);
    std::fs::create_dir_all(&dir)?;
    let mut manifest = Manifest::new(cli.command.name(), &cfg);
    if let Some(p) = &cli.config {
        manifest.input("config", p)?;
    }
    let summary = match cli.command {
        Command::PretrainTeacher => pretrain(&cfg, Phase::TeacherPretrain, &dir, &mut manifest)?,
        Command::PretrainImae => pretrain(&cfg, Phase::ImaePretrain, &dir, &mut manifest)?,
        Command::Finetune => cmd_finetune(&cfg, &dir, &mut manifest)?,
        Command::Probe => cmd_probe(&cfg, &dir, &mut manifest)?,
        Command::SepReport => cmd_sep_report(&cfg, &dir, &mut manifest)?,
        Command::Reconstruct => cmd_reconstruct(&cfg, &dir, &mut manifest)?,
        Command::Plots => cmd_plots(&cfg, &dir, &mut manifest)?,
    };
    let path = manifest.save(&dir)?;
    Ok(format!("{summary}\nmanifest: {}", path.display()))
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| ImaeError::Config(format!("{key} is required by this command")))
}

fn load_checkpoint(path: &Path, role: &str, manifest: &mut Manifest) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    manifest.input(role, path)?;
    Ok(ck)
}

fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<Dataset> {
    let data = load_dataset(&cfg.dataset, split)?;
    log::info!("{} split: {} images of {:?}", split.as_str(), data.len(), data.image_shape());
    Ok(data)
}

fn check_input_size(model: &BackboneConfig, data: &Dataset) -> Result<()> {
    if data.image_shape() != (model.image_size, model.image_size, model.channels) {
        return Err(ImaeError::Config(format!(
            "checkpoint expects {0}x{0} images but dataset.image_size gives {1:?}",
            model.image_size,
            data.image_shape()
        )));
    }
    Ok(())
}

/// Architectures agree up to the mask ratio, which only affects sampling.
fn same_backbone(a: &BackboneConfig, b: &BackboneConfig) -> bool {
    let mut b = b.clone();
    b.mask_ratio = a.mask_ratio;
    *a == b
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn png_bytes(img: &image::RgbImage) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    Ok(bytes)
}

fn pretrain(cfg: &ExperimentConfig, phase: Phase, dir: &Path, manifest: &mut Manifest) -> Result<String> {
    let data = load_split(cfg, Split::Train)?;
    let model = cfg.model_config();
    let teacher = match (phase, &cfg.paths.teacher) {
        (Phase::ImaePretrain, Some(p)) if cfg.loss.use_distill => {
            let ck = load_checkpoint(p, "teacher", manifest)?;
            if !same_backbone(&model, &ck.model) {
                return Err(ImaeError::Config("teacher architecture differs from model".into()));
            }
            Some(ck.params.subset("encoder."))
        }
        _ => None,
    };
    let mut trainer = Pretrainer::new(
        phase,
        model,
        cfg.train.clone(),
        cfg.mix.clone(),
        cfg.loss.clone(),
        &data,
        teacher,
    )?;
    trainer.config_echo = cfg.to_json();
    let resumed = match &cfg.paths.ckpt {
        Some(p) => {
            let ck = load_checkpoint(p, "resume", manifest)?;
            trainer.resume(&ck)?;
            log::info!("resumed from {} at step {}", p.display(), ck.step);
            true
        }
        None => false,
    };
    trainer.run(None)?;

    let ck = trainer.checkpoint();
    manifest.write_output(dir, "checkpoint.ckpt", "checkpoint", &ck.to_bytes()?)?;
    let csv = trainer.metrics_csv();
    manifest.write_output(dir, "metrics.csv", "metrics", csv.as_bytes())?;
    let last = trainer.metrics.last().map_or(f64::NAN, |r| r.report.total);
    Ok(format!(
        "{}: {} steps{} (total loss {last:.5})\ncheckpoint: {}",
        phase.as_str(),
        trainer.step,
        if resumed { " after resume" } else { "" },
        dir.join("checkpoint.ckpt").display()
    ))
}

fn cmd_finetune(cfg: &ExperimentConfig, dir: &Path, manifest: &mut Manifest) -> Result<String> {
    let ck = load_checkpoint(required(&cfg.paths.ckpt, "paths.ckpt")?, "checkpoint", manifest)?;
    let (train, val) = (load_split(cfg, Split::Train)?, load_split(cfg, Split::Val)?);
    check_input_size(&ck.model, &train)?;
    let (report, params) = finetune(&ck.model, &ck.params, &train, &val, &cfg.finetune)?;
    let mut out = Checkpoint::new(Phase::Finetune.as_str(), ck.model.clone(), params);
    out.config = cfg.to_json();
    manifest.write_output(dir, "checkpoint.ckpt", "checkpoint", &out.to_bytes()?)?;
    manifest.write_output(dir, "report.json", "report", &to_json(&report)?)?;
    Ok(format!("finetune top-1 {:.2}% ({}/{})", report.top1, report.correct, report.total))
}

fn cmd_probe(cfg: &ExperimentConfig, dir: &Path, manifest: &mut Manifest) -> Result<String> {
    let ck = load_checkpoint(required(&cfg.paths.ckpt, "paths.ckpt")?, "checkpoint", manifest)?;
    let (train, val) = (load_split(cfg, Split::Train)?, load_split(cfg, Split::Val)?);
    check_input_size(&ck.model, &train)?;
    let report = linear_probe(&ck.model, &ck.params, &train, &val, &cfg.probe)?;
    manifest.write_output(dir, "report.json", "report", &to_json(&report)?)?;
    Ok(format!("linear probe top-1 {:.2}% ({}/{})", report.top1, report.correct, report.total))
}

fn cmd_sep_report(cfg: &ExperimentConfig, dir: &Path, manifest: &mut Manifest) -> Result<String> {
    let ck = load_checkpoint(required(&cfg.paths.ckpt, "paths.ckpt")?, "checkpoint", manifest)?;
    let teacher = load_checkpoint(required(&cfg.paths.teacher, "paths.teacher")?, "teacher", manifest)?;
    if !same_backbone(&ck.model, &teacher.model) {
        return Err(ImaeError::Config("student and teacher architectures differ".into()));
    }
    let val = load_split(cfg, Split::Val)?;
    check_input_size(&ck.model, &val)?;
    let features = collect_features(
        &ck.model,
        &ck.params,
        &teacher.params,
        &val,
        Some(&cfg.mix),
        cfg.eval.images,
        cfg.eval.seed,
    )?;
    let split = SplitOptions {
        fit_fraction: cfg.eval.fit_fraction,
        seed: cfg.eval.seed,
        eval_on_fit: false,
    };
    let mut lambdas = vec![cfg.eval.lambda];
    lambdas.extend(cfg.eval.sweep.iter().copied().filter(|l| *l != cfg.eval.lambda));
    let reports = lambdas
        .iter()
        .map(|&l| report_from_features(&features, l, split, LassoOptions::default()))
        .collect::<Result<Vec<_>>>()?;
    manifest.write_output(dir, "separability.csv", "report", reports_csv(&reports).as_bytes())?;
    manifest.write_output(dir, "separability.json", "report", &to_json(&reports)?)?;
    Ok(reports_table(&reports))
}

fn cmd_reconstruct(cfg: &ExperimentConfig, dir: &Path, manifest: &mut Manifest) -> Result<String> {
    let ck = load_checkpoint(required(&cfg.paths.ckpt, "paths.ckpt")?, "checkpoint", manifest)?;
    let rc = &cfg.reconstruct;
    let val = load_split(cfg, Split::Val)?;
    check_input_size(&ck.model, &val)?;
    if rc.pair.iter().any(|&i| i >= val.len()) || rc.pair[0] == rc.pair[1] {
        return Err(ImaeError::Config(format!(
            "reconstruct.pair {:?} must name two distinct validation images (< {})",
            rc.pair,
            val.len()
        )));
    }
    let mut model = ck.model.clone();
    model.mask_ratio = rc.mask_ratio.unwrap_or(model.mask_ratio);
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rc.seed);
    let mask = MaskSpec::sample(1, model.num_patches(), model.mask_ratio, &mut rng)?;
    let pair = val.batch(&rc.pair);
    // Prefer the target convention the checkpoint was trained with.
    let normalized = ck
        .config
        .pointer("/loss/norm_pix_targets")
        .and_then(serde_json::Value::as_bool)
        .unwrap_or(cfg.loss.norm_pix_targets);
    let rows = reconstruction_rows(&model, &ck.params, &pair, &rc.alphas, &mask, normalized)?;
    let img = render_grid(&rows, rc.scale);
    manifest.write_output(dir, "grid.png", "grid", &png_bytes(&img)?)?;
    let meta = serde_json::json!({
        "columns": COLUMNS,
        "mask_ratio": model.mask_ratio,
        "pair": rc.pair,
        "rows": summaries(&rows),
        "width": img.width(),
        "height": img.height(),
    });
    manifest.write_output(dir, "grid.json", "grid", &to_json(&meta)?)?;
    Ok(format!(
        "{} rows x {} columns, {}x{} px",
        rows.len(),
        COLUMNS.len(),
        img.width(),
        img.height()
    ))
}

fn cmd_plots(cfg: &ExperimentConfig, dir: &Path, manifest: &mut Manifest) -> Result<String> {
    let a = load_checkpoint(required(&cfg.paths.ckpt, "paths.ckpt")?, "checkpoint_a", manifest)?;
    let b = load_checkpoint(required(&cfg.paths.ckpt_b, "paths.ckpt_b")?, "checkpoint_b", manifest)?;
    let (enc_a, enc_b) = (a.params.subset("encoder."), b.params.subset("encoder."));
    if !same_backbone(&a.model, &b.model) || !same_architecture(&enc_a, &enc_b) {
        return Err(ImaeError::Config("plots needs two checkpoints of the same architecture".into()));
    }
    let pc = &cfg.plots;
    let hist = Histogram::new(&encoder_weights(&enc_a), &encoder_weights(&enc_b), pc.bins)?;
    manifest.write_output(dir, "weights_hist.csv", "histogram", hist.csv().as_bytes())?;
    manifest.write_output(dir, "weights_hist.png", "histogram", &png_bytes(&hist.render(160))?)?;

    let val = load_split(cfg, Split::Val)?;
    check_input_size(&a.model, &val)?;
    if pc.image >= val.len() {
        return Err(ImaeError::Config(format!("plots.image {} >= {} validation images", pc.image, val.len())));
    }
    let image = val.batch(&[pc.image]);
    for (tag, ck) in [("a", &a), ("b", &b)] {
        let attn = imae_core::backbone::attention_map(&ck.model, &ck.params, &image, pc.layer, pc.head)?;
        manifest.write_output(dir, &format!("attention_{tag}.csv"), "attention", matrix_csv(&attn).as_bytes())?;
        manifest.write_output(dir, &format!("attention_{tag}.png"), "attention", &png_bytes(&heatmap(&attn, 8))?)?;
    }
    let zero = hist.zero_bin();
    Ok(format!(
        "{} bins over [-{l}, {l}]; zero-bin counts a={} b={}",
        hist.bins(),
        hist.counts_a[zero],
        hist.counts_b[zero],
        l = hist.limit
    ))
}
