//! Declarative experiment configuration (TOML) with dotted `key=value` overrides.
//!
//! Unknown keys are rejected at every level, and overrides are type-checked by
//! re-deserializing the merged document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, Profile};
use crate::data::DataConfig;
use crate::error::{ImaeError, Result};
use crate::imae::LossConfig;
use crate::mixer::MixConfig;
use crate::trainer::{FinetuneConfig, Phase, ProbeConfig, TrainConfig};

/// Architecture selection: a named profile plus optional per-field overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_profile")]
    pub profile: Profile,
    pub patch_size: Option<usize>,
    pub embed_dim: Option<usize>,
    pub depth: Option<usize>,
    pub num_heads: Option<usize>,
    pub decoder_dim: Option<usize>,
    pub decoder_depth: Option<usize>,
    pub decoder_heads: Option<usize>,
}

fn default_profile() -> Profile {
    Profile::Micro
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            profile: Profile::Micro,
            patch_size: None,
            embed_dim: None,
            depth: None,
            num_heads: None,
            decoder_dim: None,
            decoder_depth: None,
            decoder_heads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Lasso penalty of the separability regressor.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Penalties evaluated by the report command.
    #[serde(default = "default_sweep")]
    pub sweep: Vec<f64>,
    /// Number of validation images fed to the separability evaluation.
    #[serde(default = "default_eval_images")]
    pub images: usize,
    /// Fraction of samples used to fit the regressor (the rest is held out).
    #[serde(default = "default_fit_fraction")]
    pub fit_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_lambda() -> f64 {
    1e-3
}
fn default_sweep() -> Vec<f64> {
    vec![0.0, 1e-4, 1e-3, 1e-2]
}
fn default_eval_images() -> usize {
    256
}
fn default_fit_fraction() -> f64 {
    0.8
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            sweep: default_sweep(),
            images: default_eval_images(),
            fit_fraction: default_fit_fraction(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Checkpoint read by finetune / probe / sep-report / reconstruct / plots,
    /// and resumed by the pre-training commands when present.
    pub ckpt: Option<PathBuf>,
    /// Frozen vanilla-MAE teacher.
    pub teacher: Option<PathBuf>,
    /// Second checkpoint compared by `plots`.
    pub ckpt_b: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutSection {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutSection {
    fn default() -> Self {
        Self { dir: default_out() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructSection {
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    /// Mask ratio used for display; defaults to the model's.
    pub mask_ratio: Option<f64>,
    /// Validation indices of the (first, second) images of the pair.
    #[serde(default = "default_pair")]
    pub pair: [usize; 2],
    /// Pixel scale of each grid cell.
    #[serde(default = "default_scale")]
    pub scale: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_alphas() -> Vec<f64> {
    (1..=9).map(|k| k as f64 * 0.05).chain([0.5]).collect()
}
fn default_pair() -> [usize; 2] {
    [0, 1]
}
fn default_scale() -> usize {
    4
}

impl Default for ReconstructSection {
    fn default() -> Self {
        Self {
            alphas: default_alphas(),
            mask_ratio: None,
            pair: default_pair(),
            scale: default_scale(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotsSection {
    #[serde(default)]
    pub layer: usize,
    #[serde(default)]
    pub head: usize,
    /// Validation index of the image whose attention is drawn.
    #[serde(default)]
    pub image: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

fn default_bins() -> usize {
    200
}

impl Default for PlotsSection {
    fn default() -> Self {
        Self {
            layer: 0,
            head: 0,
            image: 0,
            bins: default_bins(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_phase")]
    pub phase: Phase,
    #[serde(default = "default_mask_ratio")]
    pub mask_ratio: f64,
    #[serde(default)]
    pub dataset: DataConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub mix: MixConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub out: OutSection,
    #[serde(default)]
    pub reconstruct: ReconstructSection,
    #[serde(default)]
    pub plots: PlotsSection,
}

fn default_phase() -> Phase {
    Phase::ImaePretrain
}
fn default_mask_ratio() -> f64 {
    0.75
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("every field has a default")
    }
}

fn config_err(e: impl std::fmt::Display) -> ImaeError {
    ImaeError::Config(e.to_string().trim().replace('\n', " "))
}

/// Parse the right-hand side of an override as a TOML value; bare words that are
/// not valid TOML become strings.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply `a.b.c=value` to a TOML document, creating intermediate tables.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| ImaeError::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ImaeError::Config(format!("malformed override key {key:?}")));
    }
    let (last, path) = parts.split_last().expect("non-empty");
    let mut table = doc;
    for p in path {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(ImaeError::Config(format!("override {key:?}: {p} is not a section"))),
        };
    }
    table.insert(last.to_string(), parse_value(value.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Parse a TOML document and apply overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(config_err)?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(doc).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| ImaeError::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.mix.validate()?;
        self.loss.validate()?;
        if !(self.eval.fit_fraction > 0.0 && self.eval.fit_fraction <= 1.0) {
            return Err(ImaeError::Config("eval.fit_fraction must lie in (0, 1]".into()));
        }
        if !is_nonneg(self.eval.lambda) || !self.eval.sweep.iter().copied().all(is_nonneg) {
            return Err(ImaeError::Config("eval penalties must be >= 0".into()));
        }
        if self.reconstruct.alphas.iter().any(|a| !(*a > 0.0 && *a <= 0.5)) {
            return Err(ImaeError::Config("reconstruct.alphas must lie in (0, 0.5]".into()));
        }
        if self.plots.bins == 0 {
            return Err(ImaeError::Config("plots.bins must be >= 1".into()));
        }
        Ok(())
    }

    /// The backbone implied by the profile, overrides, image size and mask ratio.
    pub fn model_config(&self) -> BackboneConfig {
        let mut m = BackboneConfig::from_profile(self.model.profile, self.dataset.image_size, self.mask_ratio);
        let s = &self.model;
        m.patch_size = s.patch_size.unwrap_or(m.patch_size);
        if let Some(d) = s.embed_dim {
            m.embed_dim = d;
            m.decoder_dim = d / 2;
        }
        m.depth = s.depth.unwrap_or(m.depth);
        m.num_heads = s.num_heads.unwrap_or(m.num_heads);
        m.decoder_dim = s.decoder_dim.unwrap_or(m.decoder_dim);
        m.decoder_depth = s.decoder_depth.unwrap_or(m.decoder_depth);
        m.decoder_heads = s.decoder_heads.unwrap_or(m.decoder_heads);
        m
    }

    /// JSON echo stored in checkpoints and manifests.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_json()).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Output directory, honouring the `IMAE_OUT` environment override.
    pub fn out_dir(&self) -> PathBuf {
        match std::env::var_os("IMAE_OUT") {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => self.out.dir.clone(),
        }
    }
}

/// Finite and not negative.
fn is_nonneg(v: f64) -> bool {
    v.is_finite() && v >= 0.0
}
