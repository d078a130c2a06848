//! Pre-training (teacher MAE and i-MAE), Mixup finetuning and linear probing.

use std::fmt::Write as _;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::{encode, encoder_graph, init_backbone, linear, BackboneConfig, MaskSpec, INIT_STD};
use crate::checkpoint::Checkpoint;
use crate::data::{derive_seed, patchify, Dataset, ImageBatch};
use crate::error::{ImaeError, Result};
use crate::imae::{imae_forward_with_mask, init_heads, mae_forward, LossConfig, LossReport};
use crate::mixer::{random_derangement, MixConfig, MixSpec};
use crate::optim::{AdamW, LrSchedule, Sgd};
use crate::params::{trunc_normal, Binder, ParamStore};
use crate::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    TeacherPretrain,
    ImaePretrain,
    Finetune,
    LinearProbe,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::TeacherPretrain => "teacher_pretrain",
            Phase::ImaePretrain => "imae_pretrain",
            Phase::Finetune => "finetune",
            Phase::LinearProbe => "linear_probe",
        }
    }
}

/// Self-supervised pre-training schedule and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Learning rate per 256 samples of effective batch.
    #[serde(default = "default_pretrain_lr")]
    pub base_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup: u64,
    #[serde(default = "default_epochs")]
    pub epochs: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Micro-batches accumulated per optimizer step.
    #[serde(default = "default_one")]
    pub accum: usize,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2_pretrain")]
    pub beta2: f64,
    #[serde(default)]
    pub seed: u64,
    /// Stop after this many optimizer steps (the schedule still spans `epochs`).
    #[serde(default)]
    pub max_steps: Option<u64>,
}

fn default_pretrain_lr() -> f64 {
    1.5e-4
}
fn default_warmup() -> u64 {
    1
}
fn default_epochs() -> u64 {
    10
}
fn default_batch() -> usize {
    64
}
fn default_one() -> usize {
    1
}
fn default_wd() -> f64 {
    0.05
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2_pretrain() -> f64 {
    0.95
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: default_pretrain_lr(),
            warmup: default_warmup(),
            epochs: default_epochs(),
            batch: default_batch(),
            accum: 1,
            weight_decay: default_wd(),
            beta1: default_beta1(),
            beta2: default_beta2_pretrain(),
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, mixing: bool) -> Result<()> {
        if self.warmup >= self.epochs {
            return Err(ImaeError::Config(format!(
                "train.warmup ({}) must be below train.epochs ({})",
                self.warmup, self.epochs
            )));
        }
        if self.batch == 0 || (mixing && self.batch < 2) {
            return Err(ImaeError::Config(format!("train.batch too small: {}", self.batch)));
        }
        if self.accum == 0 {
            return Err(ImaeError::Config("train.accum must be >= 1".into()));
        }
        Ok(())
    }

    /// Absolute learning rate: `base_lr * effective_batch / 256`.
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * (self.batch * self.accum) as f64 / 256.0
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: u64,
    pub step: u64,
    pub report: LossReport,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,step,recon_sub,recon_dom,distill_sub,distill_dom,total,lr";

impl MetricRow {
    pub fn csv(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.step, r.recon_sub, r.recon_dom, r.distill_sub, r.distill_dom, r.total, self.lr
        )
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv());
    }
    s
}

fn average(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let mean = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    LossReport {
        recon_sub: mean(|r| r.recon_sub),
        recon_dom: mean(|r| r.recon_dom),
        distill_sub: mean(|r| r.distill_sub),
        distill_dom: mean(|r| r.distill_dom),
        total: mean(|r| r.total),
        sub_coeff_mean: mean(|r| r.sub_coeff_mean),
        sub_coeff_min: reports.iter().map(|r| r.sub_coeff_min).fold(f64::INFINITY, f64::min),
        sub_coeff_max: reports.iter().map(|r| r.sub_coeff_max).fold(f64::NEG_INFINITY, f64::max),
    }
}

fn add_scaled(acc: &mut Option<ParamStore>, grads: ParamStore, k: f64) {
    match acc {
        None => {
            let mut g = grads;
            for (_, m) in g.iter_mut() {
                *m *= k;
            }
            *acc = Some(g);
        }
        Some(a) => {
            for (name, m) in grads.iter() {
                match a.get_mut(name) {
                    Some(t) => t.scaled_add(k, m),
                    None => a.insert(name.clone(), m * k),
                }
            }
        }
    }
}

/// Masked-autoencoder pre-training, single-image (teacher) or mixed (i-MAE).
pub struct Pretrainer<'a> {
    pub phase: Phase,
    pub model: BackboneConfig,
    pub train: TrainConfig,
    pub mix: MixConfig,
    pub loss: LossConfig,
    pub params: ParamStore,
    pub teacher: Option<ParamStore>,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub metrics: Vec<MetricRow>,
    /// Echoed into checkpoints.
    pub config_echo: serde_json::Value,
    data: &'a Dataset,
}

impl<'a> Pretrainer<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        phase: Phase,
        model: BackboneConfig,
        train: TrainConfig,
        mix: MixConfig,
        loss: LossConfig,
        data: &'a Dataset,
        teacher: Option<ParamStore>,
    ) -> Result<Self> {
        let mixing = phase == Phase::ImaePretrain;
        if !matches!(phase, Phase::TeacherPretrain | Phase::ImaePretrain) {
            return Err(ImaeError::Config(format!("{} is not a pre-training phase", phase.as_str())));
        }
        model.validate()?;
        train.validate(mixing)?;
        mix.validate()?;
        loss.validate()?;
        if mixing && loss.use_distill && loss.c > 0.0 && teacher.is_none() {
            return Err(ImaeError::Config(
                "i-MAE pre-training with distillation needs a teacher checkpoint (paths.teacher)".into(),
            ));
        }
        if data.image_shape() != (model.image_size, model.image_size, model.channels) {
            return Err(ImaeError::Data(format!(
                "dataset images {:?} do not match the model input size {}",
                data.image_shape(),
                model.image_size
            )));
        }
        if data.batches_per_epoch(train.batch, true) < train.accum {
            return Err(ImaeError::Data(format!(
                "{} samples are too few for batch {} x accum {}",
                data.len(),
                train.batch,
                train.accum
            )));
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(train.seed, &[0x1417, phase as u64]));
        let mut params = init_backbone(&model, &mut init_rng);
        if mixing {
            params.merge(&init_heads(model.embed_dim, &mut init_rng));
        }
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(train.seed, &[0x5a11, phase as u64]));
        Ok(Self {
            phase,
            opt: AdamW::new(train.beta1, train.beta2, train.weight_decay),
            model,
            train,
            mix,
            loss,
            params,
            teacher,
            rng,
            step: 0,
            metrics: Vec::new(),
            config_echo: serde_json::Value::Null,
            data,
        })
    }

    /// Continue a run from a checkpoint written by [`Pretrainer::checkpoint`].
    pub fn resume(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.model != self.model || ck.phase != self.phase.as_str() {
            return Err(ImaeError::Checkpoint("checkpoint does not match this run".into()));
        }
        self.params = ck.params.clone();
        self.opt = ck
            .optimizer
            .clone()
            .ok_or_else(|| ImaeError::Checkpoint("checkpoint has no optimizer state".into()))?;
        self.rng = ck
            .rng
            .clone()
            .ok_or_else(|| ImaeError::Checkpoint("checkpoint has no generator state".into()))?;
        self.step = ck.step;
        Ok(())
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.data.batches_per_epoch(self.train.batch, true) as u64
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.batches_per_epoch() / self.train.accum as u64
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.train.peak_lr(),
            warmup_steps: self.train.warmup * self.steps_per_epoch(),
            total_steps: self.train.epochs * self.steps_per_epoch(),
        }
    }

    pub fn total_steps(&self) -> u64 {
        let full = self.train.epochs * self.steps_per_epoch();
        self.train.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.steps_per_epoch().max(1)
    }

    fn micro_batch(&self, micro: u64) -> ImageBatch {
        let per_epoch = self.steps_per_epoch() * self.train.accum as u64;
        let epoch = micro / per_epoch;
        let index = (micro % per_epoch) as usize;
        self.data.epoch_batch(self.train.batch, self.train.seed, epoch, index)
    }

    /// One optimizer step over `accum` micro-batches.
    pub fn step_once(&mut self) -> Result<MetricRow> {
        let accum = self.train.accum;
        let mut reports = Vec::with_capacity(accum);
        let mut grads: Option<ParamStore> = None;
        for a in 0..accum {
            let batch = self.micro_batch(self.step * accum as u64 + a as u64);
            let mask = MaskSpec::sample(batch.len(), self.model.num_patches(), self.model.mask_ratio, &mut self.rng)?;
            let (out, spec) = match self.phase {
                Phase::TeacherPretrain => (
                    mae_forward(&self.model, &batch, &mask, &self.params, self.loss.norm_pix_targets, true)?,
                    None,
                ),
                _ => {
                    let spec = MixSpec::sample(&batch, &self.mix, &mut self.rng)?;
                    let out = imae_forward_with_mask(
                        &self.model,
                        &batch,
                        &spec,
                        &mask,
                        &self.params,
                        self.teacher.as_ref(),
                        &self.loss,
                        true,
                    )?;
                    (out, Some(spec))
                }
            };
            if !out.report.is_finite() {
                return Err(nan_diagnostic(self.step, &batch, spec.as_ref(), &out.report));
            }
            reports.push(out.report);
            add_scaled(&mut grads, out.grads.expect("requested gradients"), 1.0 / accum as f64);
        }
        let lr = self.schedule().lr(self.step);
        let grads = grads.expect("accum >= 1");
        if grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(ImaeError::Numeric(format!("non-finite gradient at step {}", self.step)));
        }
        self.opt.apply(&mut self.params, &grads, lr);
        let row = MetricRow {
            epoch: self.epoch(),
            step: self.step,
            report: average(&reports),
            lr,
        };
        self.step += 1;
        self.metrics.push(row.clone());
        Ok(row)
    }

    /// Train until `total_steps` (or `steps` more, if given).
    pub fn run(&mut self, steps: Option<u64>) -> Result<()> {
        let end = steps.map_or(self.total_steps(), |s| (self.step + s).min(self.total_steps()));
        while self.step < end {
            let row = self.step_once()?;
            if row.step % 50 == 0 {
                log::debug!("{} step {} total {:.5}", self.phase.as_str(), row.step, row.report.total);
            }
        }
        Ok(())
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.metrics)
    }

    /// Mean of a metric over each epoch's rows.
    pub fn epoch_means(&self, f: fn(&LossReport) -> f64) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for r in &self.metrics {
            let e = r.epoch as usize;
            if out.len() <= e {
                out.resize(e + 1, (0.0, 0));
            }
            out[e].0 += f(&r.report);
            out[e].1 += 1;
        }
        out.into_iter().filter(|(_, n)| *n > 0).map(|(s, n)| s / n as f64).collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            phase: self.phase.as_str().into(),
            model: self.model.clone(),
            config: self.config_echo.clone(),
            params: self.params.clone(),
            optimizer: Some(self.opt.clone()),
            rng: Some(self.rng.clone()),
            epoch: self.epoch(),
            step: self.step,
        }
    }
}

fn nan_diagnostic(step: u64, batch: &ImageBatch, spec: Option<&MixSpec>, report: &LossReport) -> ImaeError {
    let dump = serde_json::json!({
        "step": step,
        "ids": batch.ids,
        "mix_spec": spec,
        "report": report,
    });
    ImaeError::Numeric(format!("non-finite loss; batch: {dump}"))
}

/// Convenience wrapper: build, run and checkpoint a pre-training run.
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    phase: Phase,
    model: &BackboneConfig,
    train: &TrainConfig,
    mix: &MixConfig,
    loss: &LossConfig,
    data: &Dataset,
    teacher: Option<&Checkpoint>,
) -> Result<(Checkpoint, Vec<MetricRow>)> {
    let mut t = Pretrainer::new(
        phase,
        model.clone(),
        train.clone(),
        mix.clone(),
        loss.clone(),
        data,
        teacher.map(|c| c.params.subset("encoder.")),
    )?;
    t.run(None)?;
    Ok((t.checkpoint(), t.metrics))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Cls,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Learning rate per 256 samples of batch.
    #[serde(default = "default_ft_lr")]
    pub base_lr: f64,
    #[serde(default = "default_ft_epochs")]
    pub epochs: u64,
    #[serde(default = "default_warmup")]
    pub warmup: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2_ft")]
    pub beta2: f64,
    /// Mixup `Beta(b, b)` parameter; 0 disables Mixup.
    #[serde(default = "default_mixup")]
    pub mixup_beta: f64,
    #[serde(default = "default_cls")]
    pub pool: Pool,
    #[serde(default)]
    pub seed: u64,
}

fn default_ft_lr() -> f64 {
    1e-3
}
fn default_ft_epochs() -> u64 {
    10
}
fn default_beta2_ft() -> f64 {
    0.999
}
fn default_mixup() -> f64 {
    1.0
}
fn default_cls() -> Pool {
    Pool::Cls
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            base_lr: default_ft_lr(),
            epochs: default_ft_epochs(),
            warmup: default_warmup(),
            batch: default_batch(),
            weight_decay: default_wd(),
            beta1: default_beta1(),
            beta2: default_beta2_ft(),
            mixup_beta: default_mixup(),
            pool: Pool::Cls,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub top1: f64,
    pub correct: usize,
    pub total: usize,
    pub final_train_loss: f64,
}

fn one_hot_mix(labels: &[usize], perm: &[usize], lambda: f64, k: usize) -> Result<Mat> {
    let mut t = Array2::zeros((labels.len(), k));
    for (i, &l) in labels.iter().enumerate() {
        let other = labels[perm[i]];
        if l >= k || other >= k {
            return Err(ImaeError::Shape(format!("label {} does not fit a {k}-way head", l.max(other))));
        }
        t[[i, l]] += lambda;
        t[[i, other]] += 1.0 - lambda;
    }
    Ok(t)
}

/// Mixup soft targets: `lambda * onehot(y_i) + (1 - lambda) * onehot(y_perm[i])`.
pub fn mixup_targets(labels: &[usize], perm: &[usize], lambda: f64, num_classes: usize) -> Result<Mat> {
    one_hot_mix(labels, perm, lambda, num_classes)
}

/// Logits of the classifier on top of pooled encoder features, built in `g`.
fn classifier_graph(
    g: &mut Graph,
    b: &mut Binder,
    model: &BackboneConfig,
    images: &ImageBatch,
    pool: Pool,
) -> Result<crate::autograd::Var> {
    let rows = patchify(images, model.patch_size)?.to_rows();
    let mask = MaskSpec::full(images.len(), model.num_patches());
    let enc = encoder_graph(g, b, model, &rows, &mask)?;
    let t = enc.tokens_per_sample;
    let pooled = match pool {
        Pool::Cls => g.gather_rows(enc.tokens, (0..images.len()).map(|i| i * t).collect()),
        Pool::Mean => {
            let mut p = Array2::zeros((images.len(), images.len() * t));
            for i in 0..images.len() {
                for j in 1..t {
                    p[[i, i * t + j]] = 1.0 / (t - 1) as f64;
                }
            }
            let p = g.leaf(p);
            g.matmul(p, enc.tokens)
        }
    };
    linear(g, b, "classifier.head", pooled)
}

pub fn init_classifier<R: Rng + ?Sized>(dim: usize, classes: usize, rng: &mut R) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert("classifier.head.weight", trunc_normal(rng, dim, classes, INIT_STD));
    p.insert("classifier.head.bias", Array2::zeros((1, classes)));
    p
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

pub fn classify(model: &BackboneConfig, params: &ParamStore, data: &Dataset, pool: Pool, batch: usize) -> Result<AccuracyReport> {
    let mut correct = 0;
    for chunk in data.batches(batch, 0, 0, false, false) {
        let mut g = Graph::new();
        let mut b = Binder::new(params);
        let logits = classifier_graph(&mut g, &mut b, model, &chunk, pool)?;
        let labels = chunk.labels.as_ref().expect("dataset labels");
        for (row, &l) in g.value(logits).rows().into_iter().zip(labels) {
            correct += usize::from(argmax(row) == l);
        }
    }
    Ok(AccuracyReport {
        top1: 100.0 * correct as f64 / data.len().max(1) as f64,
        correct,
        total: data.len(),
        final_train_loss: f64::NAN,
    })
}

/// End-to-end finetuning of the encoder with a linear head and Mixup
/// cross-entropy; top-1 on the clean validation set.
pub fn finetune(
    model: &BackboneConfig,
    encoder: &ParamStore,
    train: &Dataset,
    val: &Dataset,
    cfg: &FinetuneConfig,
) -> Result<(AccuracyReport, ParamStore)> {
    if cfg.warmup >= cfg.epochs || cfg.batch < 2 {
        return Err(ImaeError::Config("finetune needs warmup < epochs and batch >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xf1e7]));
    let mut params = encoder.subset("encoder.");
    if params.is_empty() {
        return Err(ImaeError::Checkpoint("checkpoint has no encoder parameters".into()));
    }
    params.merge(&init_classifier(model.embed_dim, train.num_classes, &mut rng));
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.weight_decay);
    let steps_per_epoch = train.batches_per_epoch(cfg.batch, true) as u64;
    let sched = LrSchedule {
        base_lr: cfg.base_lr * cfg.batch as f64 / 256.0,
        warmup_steps: cfg.warmup * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let mixup = (cfg.mixup_beta > 0.0).then(|| Beta::new(cfg.mixup_beta, cfg.mixup_beta).expect("positive"));
    let mut step = 0;
    let mut last_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        for batch in train.batches(cfg.batch, cfg.seed, epoch, true, true) {
            let labels = batch.labels.clone().expect("dataset labels");
            let lambda = mixup.as_ref().map_or(1.0, |d| d.sample(&mut rng));
            let perm = random_derangement(batch.len(), &mut rng);
            let spec = MixSpec::new(perm.clone(), vec![lambda; batch.len()], None)?;
            let mixed = crate::mixer::mix_batch(&batch, &spec)?.mixed;
            let targets = mixup_targets(&labels, &perm, lambda, train.num_classes)?;
            let mut g = Graph::new();
            let mut b = Binder::new(&params);
            let logits = classifier_graph(&mut g, &mut b, model, &mixed, cfg.pool)?;
            let loss = g.soft_cross_entropy(logits, targets);
            last_loss = g.scalar(loss);
            if !last_loss.is_finite() {
                return Err(ImaeError::Numeric(format!("non-finite finetune loss at step {step}")));
            }
            let mut grads = g.backward(loss);
            let grads = b.collect(&mut grads);
            opt.apply(&mut params, &grads, sched.lr(step));
            step += 1;
        }
    }
    let mut report = classify(model, &params, val, cfg.pool, cfg.batch)?;
    report.final_train_loss = last_loss;
    Ok((report, params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_probe_lr")]
    pub base_lr: f64,
    #[serde(default = "default_probe_epochs")]
    pub epochs: u64,
    #[serde(default = "default_warmup")]
    pub warmup: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_mean")]
    pub pool: Pool,
    #[serde(default)]
    pub seed: u64,
}

fn default_probe_lr() -> f64 {
    1e-2
}
fn default_probe_epochs() -> u64 {
    50
}
fn default_momentum() -> f64 {
    0.9
}
fn default_mean() -> Pool {
    Pool::Mean
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            base_lr: default_probe_lr(),
            epochs: default_probe_epochs(),
            warmup: default_warmup(),
            batch: default_batch(),
            momentum: default_momentum(),
            weight_decay: 0.0,
            pool: Pool::Mean,
            seed: 0,
        }
    }
}

pub const BN_EPS: f64 = 1e-6;

/// Batch normalization without learned scale or shift.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub running_mean: ndarray::Array1<f64>,
    pub running_var: ndarray::Array1<f64>,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            running_mean: ndarray::Array1::zeros(dim),
            running_var: ndarray::Array1::ones(dim),
            momentum: 0.1,
        }
    }

    /// Normalize with batch statistics and update the running estimates.
    pub fn train(&mut self, x: &Mat) -> Mat {
        let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
        let var = x.var_axis(Axis(0), 0.0);
        let m = self.momentum;
        self.running_mean = &self.running_mean * (1.0 - m) + &mean * m;
        self.running_var = &self.running_var * (1.0 - m) + &var * m;
        (x - &mean) / &var.mapv(|v| (v + BN_EPS).sqrt())
    }

    pub fn eval(&self, x: &Mat) -> Mat {
        (x - &self.running_mean) / &self.running_var.mapv(|v| (v + BN_EPS).sqrt())
    }
}

/// Pooled frozen-encoder features `[M, D]` of a whole dataset.
pub fn extract_features(model: &BackboneConfig, params: &ParamStore, data: &Dataset, pool: Pool, batch: usize) -> Result<Mat> {
    let mut parts = Vec::new();
    for chunk in data.batches(batch, 0, 0, false, false) {
        let mask = MaskSpec::full(chunk.len(), model.num_patches());
        let f = encode(model, params, &chunk, &mask)?;
        parts.push(match pool {
            Pool::Cls => f.cls_tokens().expect("class token"),
            Pool::Mean => f.mean_patch_tokens(),
        });
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("same width"))
}

/// Linear classifier after a non-affine batch norm, trained with momentum SGD on
/// fixed features.
pub fn probe_on_features(
    train_x: &Mat,
    train_y: &[usize],
    val_x: &Mat,
    val_y: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<AccuracyReport> {
    if cfg.warmup >= cfg.epochs || cfg.batch == 0 {
        return Err(ImaeError::Config("probe needs warmup < epochs and batch >= 1".into()));
    }
    if train_y.iter().chain(val_y).any(|&l| l >= num_classes) {
        return Err(ImaeError::Shape(format!("label outside a {num_classes}-way head")));
    }
    let d = train_x.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x9b0e]));
    let mut params = init_classifier(d, num_classes, &mut rng);
    let mut bn = BatchNorm::new(d);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let m = train_x.nrows();
    let steps_per_epoch = (m / cfg.batch).max(1) as u64;
    let sched = LrSchedule {
        base_lr: cfg.base_lr * cfg.batch as f64 / 256.0,
        warmup_steps: cfg.warmup * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let mut order: Vec<usize> = (0..m).collect();
    let mut step = 0;
    let mut last_loss = f64::NAN;
    for _ in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(cfg.batch).take(steps_per_epoch as usize) {
            if chunk.len() < 2 {
                continue;
            }
            let x = bn.train(&train_x.select(Axis(0), chunk));
            let labels: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let ident: Vec<usize> = (0..labels.len()).collect();
            let targets = one_hot_mix(&labels, &ident, 1.0, num_classes)?;
            let mut g = Graph::new();
            let mut b = Binder::new(&params);
            let xv = g.leaf(x);
            let logits = linear(&mut g, &mut b, "classifier.head", xv)?;
            let loss = g.soft_cross_entropy(logits, targets);
            last_loss = g.scalar(loss);
            let mut grads = g.backward(loss);
            let grads = b.collect(&mut grads);
            opt.apply(&mut params, &grads, sched.lr(step));
            step += 1;
        }
    }
    let logits = bn.eval(val_x).dot(params.require("classifier.head.weight")?) + params.require("classifier.head.bias")?;
    let correct = logits
        .rows()
        .into_iter()
        .zip(val_y)
        .filter(|(row, &l)| argmax(row.view()) == l)
        .count();
    Ok(AccuracyReport {
        top1: 100.0 * correct as f64 / val_y.len().max(1) as f64,
        correct,
        total: val_y.len(),
        final_train_loss: last_loss,
    })
}

/// Linear probing of a frozen encoder.
pub fn linear_probe(
    model: &BackboneConfig,
    encoder: &ParamStore,
    train: &Dataset,
    val: &Dataset,
    cfg: &ProbeConfig,
) -> Result<AccuracyReport> {
    let train_x = extract_features(model, encoder, train, cfg.pool, 256)?;
    let val_x = extract_features(model, encoder, val, cfg.pool, 256)?;
    probe_on_features(&train_x, &train.labels, &val_x, &val.labels, train.num_classes, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Profile;
    use crate::data::{load_dataset, DataConfig, Split};

    fn tiny_data(n: usize) -> Dataset {
        let cfg = DataConfig {
            image_size: 16,
            num_train: n,
            num_val: 32,
            num_classes: 4,
            ..DataConfig::default()
        };
        load_dataset(&cfg, Split::Train).unwrap()
    }

    fn nano() -> BackboneConfig {
        BackboneConfig::from_profile(Profile::Nano, 16, 0.75)
    }

    #[test]
    fn uniform_logits_cross_entropy() {
        let mut g = Graph::new();
        let l = g.leaf(Array2::zeros((3, 10)));
        let t = mixup_targets(&[1, 4, 9], &[1, 2, 0], 1.0, 10).unwrap();
        let ce = g.soft_cross_entropy(l, t);
        assert!((g.scalar(ce) - std::f64::consts::LN_10).abs() < 1e-12);
    }

    #[test]
    fn mixup_lambda_one_is_plain_targets() {
        let t = mixup_targets(&[2, 0, 1], &[1, 2, 0], 1.0, 3).unwrap();
        assert_eq!(t, ndarray::array![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let t = mixup_targets(&[2, 0], &[1, 0], 0.25, 3).unwrap();
        assert_eq!(t.row(0).to_vec(), vec![0.75, 0.0, 0.25]);
        assert!(mixup_targets(&[5, 0], &[1, 0], 0.5, 3).is_err());
    }

    #[test]
    fn batch_norm_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array2::from_shape_fn((64, 5), |(_, j)| rng.random_range(-1.0..1.0) * (j + 1) as f64 + j as f64);
        let mut bn = BatchNorm::new(5);
        let y = bn.train(&x);
        for col in y.columns() {
            let mean = col.mean().unwrap();
            let var = col.var(0.0);
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn probe_separates_separable_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let centers = Array2::from_shape_fn((3, 6), |_| rng.random_range(-3.0..3.0));
        let make = |n: usize, rng: &mut ChaCha8Rng| {
            let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let x = Array2::from_shape_fn((n, 6), |(i, j)| centers[[y[i], j]] + rng.random_range(-0.2..0.2));
            (x, y)
        };
        let (tx, ty) = make(300, &mut rng);
        let (vx, vy) = make(90, &mut rng);
        let cfg = ProbeConfig {
            base_lr: 0.5,
            epochs: 20,
            batch: 32,
            ..ProbeConfig::default()
        };
        let r = probe_on_features(&tx, &ty, &vx, &vy, 3, &cfg).unwrap();
        assert_eq!(r.top1, 100.0);
    }

    #[test]
    fn pretrain_reduces_loss_and_is_deterministic() {
        let data = tiny_data(128);
        let train = TrainConfig {
            base_lr: 0.1,
            warmup: 0,
            epochs: 1,
            batch: 16,
            ..TrainConfig::default()
        };
        let mk = || {
            let mut t = Pretrainer::new(
                Phase::ImaePretrain,
                nano(),
                train.clone(),
                MixConfig::default(),
                LossConfig {
                    use_distill: false,
                    ..LossConfig::default()
                },
                &data,
                None,
            )
            .unwrap();
            t.run(None).unwrap();
            t
        };
        let a = mk();
        let b = mk();
        assert_eq!(a.metrics_csv(), b.metrics_csv());
        assert_eq!(a.metrics.len(), 8);
        let mean = |rows: &[MetricRow]| rows.iter().map(|r| r.report.total).sum::<f64>() / rows.len() as f64;
        assert!(mean(&a.metrics[5..]) < mean(&a.metrics[..2]) - 0.05);
    }

    #[test]
    fn imae_requires_teacher_for_distillation() {
        let data = tiny_data(64);
        let r = Pretrainer::new(
            Phase::ImaePretrain,
            nano(),
            TrainConfig::default(),
            MixConfig::default(),
            LossConfig::default(),
            &data,
            None,
        );
        assert!(matches!(r, Err(ImaeError::Config(_))));
    }

    #[test]
    fn teacher_phase_uses_pretraining_optimizer_shape() {
        let data = tiny_data(64);
        let t = Pretrainer::new(
            Phase::TeacherPretrain,
            nano(),
            TrainConfig::default(),
            MixConfig::default(),
            LossConfig::default(),
            &data,
            None,
        )
        .unwrap();
        assert_eq!(t.model.mask_ratio, 0.75);
        assert_eq!((t.opt.beta1, t.opt.beta2), (0.9, 0.95));
        assert!(!t.params.contains("heads.f1.weight"));
    }

    #[test]
    fn warmup_must_precede_end() {
        let cfg = TrainConfig {
            warmup: 5,
            epochs: 5,
            ..TrainConfig::default()
        };
        assert!(cfg.validate(true).is_err());
        let cfg = TrainConfig {
            batch: 1,
            ..TrainConfig::default()
        };
        assert!(cfg.validate(true).is_err());
        assert!(cfg.validate(false).is_ok());
    }

    #[test]
    fn probe_leaves_encoder_untouched() {
        let data = tiny_data(48);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = init_backbone(&nano(), &mut rng);
        let before = params.digest();
        let cfg = ProbeConfig {
            epochs: 2,
            batch: 16,
            ..ProbeConfig::default()
        };
        let r = linear_probe(&nano(), &params, &data, &data.head(32), &cfg).unwrap();
        assert_eq!(params.digest(), before);
        assert_eq!(r.total, 32);
    }

    #[test]
    fn finetune_runs_and_reports() {
        let data = tiny_data(32);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = init_backbone(&nano(), &mut rng);
        let cfg = FinetuneConfig {
            epochs: 2,
            batch: 8,
            ..FinetuneConfig::default()
        };
        let (r, tuned) = finetune(&nano(), &params, &data, &data.head(16), &cfg).unwrap();
        assert_eq!(r.total, 16);
        assert!(r.final_train_loss.is_finite());
        assert!(tuned.contains("classifier.head.weight"));
        assert!(!tuned.contains("decoder.pred.weight"));
    }
}
