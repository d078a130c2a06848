//! The i-MAE objective: disentanglement heads, two-way masked reconstruction and
//! patch-wise distillation from a frozen vanilla-MAE teacher.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{decoder_graph, encode, encoder_graph, linear, BackboneConfig, FeatureSet, MaskSpec};
use crate::data::{normalize_pix, patchify, ImageBatch, PatchTargets};
use crate::error::{shape_err, ImaeError, Result};
use crate::mixer::{mix_batch, MixSpec};
use crate::params::{xavier_uniform, Binder, ParamStore};
use crate::Mat;

/// Head applied to the subordinate branch.
pub const HEAD_SUB: &str = "heads.f1";
/// Head applied to the dominant branch.
pub const HEAD_DOM: &str = "heads.f2";

/// Two independent per-token affine maps `D -> D`.
pub fn init_heads<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> ParamStore {
    let mut p = ParamStore::new();
    for name in [HEAD_SUB, HEAD_DOM] {
        p.insert(format!("{name}.weight"), xavier_uniform(rng, dim, dim));
        p.insert(format!("{name}.bias"), ndarray::Array2::zeros((1, dim)));
    }
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the distillation terms.
    #[serde(default = "default_c")]
    pub c: f64,
    /// `false` reconstructs (and distills) the subordinate image only.
    #[serde(default = "default_true")]
    pub dual_branch: bool,
    #[serde(default = "default_true")]
    pub use_distill: bool,
    #[serde(default = "default_true")]
    pub norm_pix_targets: bool,
}

fn default_c() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            dual_branch: true,
            use_distill: true,
            norm_pix_targets: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return Err(ImaeError::Config(format!("loss.c must be >= 0, got {}", self.c)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon_sub: f64,
    pub recon_dom: f64,
    pub distill_sub: f64,
    pub distill_dom: f64,
    pub total: f64,
    /// Mean/min/max of the subordinate mix coefficient over the batch.
    pub sub_coeff_mean: f64,
    pub sub_coeff_min: f64,
    pub sub_coeff_max: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.recon_sub, self.recon_dom, self.distill_sub, self.distill_dom, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Apply both heads to every token (class token included).
pub fn disentangle(h_m: &FeatureSet, heads: &ParamStore) -> Result<(FeatureSet, FeatureSet)> {
    let apply = |name: &str| -> Result<FeatureSet> {
        let w = heads.require(&format!("{name}.weight"))?;
        let b = heads.require(&format!("{name}.bias"))?;
        if w.nrows() != h_m.dim() {
            return Err(shape_err(format!("head {name} expects width {}, got {}", w.nrows(), h_m.dim())));
        }
        Ok(FeatureSet {
            tokens: h_m.tokens.dot(w) + b,
            ..h_m.clone()
        })
    };
    Ok((apply(HEAD_SUB)?, apply(HEAD_DOM)?))
}

/// Mean squared error over masked patches only.
pub fn recon_loss(pred: &PatchTargets, target: &PatchTargets, mask: &MaskSpec) -> Result<f64> {
    if pred.patches.dim() != target.patches.dim()
        || pred.batch_size() != mask.batch_size()
        || pred.num_patches() != mask.num_patches()
    {
        return Err(shape_err("prediction, target and mask disagree"));
    }
    let rows = mask.masked_rows();
    if rows.is_empty() {
        return Err(ImaeError::Numeric("reconstruction loss over zero masked patches".into()));
    }
    let mut g = Graph::new();
    let p = g.leaf(pred.to_rows());
    let l = g.masked_mse(p, target.to_rows(), rows);
    Ok(g.scalar(l))
}

/// Patch-token MSE between student and teacher features and its gradient with
/// respect to the student's patch tokens. Class tokens are excluded.
pub fn distill_loss_with_grad(student: &FeatureSet, teacher: &FeatureSet) -> Result<(f64, Mat)> {
    let s = student.patch_tokens();
    let t = teacher.patch_tokens();
    if s.dim() != t.dim() {
        return Err(shape_err(format!("student tokens {:?} vs teacher tokens {:?}", s.dim(), t.dim())));
    }
    let mut g = Graph::new();
    let sv = g.leaf(s);
    let l = g.mse(sv, t);
    let mut grads = g.backward(l);
    Ok((g.scalar(l), grads.take(sv).expect("gradient of leaf")))
}

pub fn distill_loss(student: &FeatureSet, teacher: &FeatureSet) -> Result<f64> {
    Ok(distill_loss_with_grad(student, teacher)?.0)
}

fn targets(images: &ImageBatch, cfg: &BackboneConfig, norm_pix: bool) -> Result<Mat> {
    let t = patchify(images, cfg.patch_size)?;
    Ok(if norm_pix { normalize_pix(&t) } else { t }.to_rows())
}

/// Loss values, plus parameter gradients when requested.
pub struct ForwardOutput {
    pub report: LossReport,
    pub grads: Option<ParamStore>,
}

/// Teacher features of the subordinate and dominant images under `mask`.
pub struct TeacherFeatures {
    pub sub: Mat,
    pub dom: Mat,
}

pub fn teacher_features(
    model: &BackboneConfig,
    teacher: &ParamStore,
    sub: &ImageBatch,
    dom: &ImageBatch,
    mask: &MaskSpec,
) -> Result<TeacherFeatures> {
    Ok(TeacherFeatures {
        sub: encode(model, teacher, sub, mask)?.patch_tokens(),
        dom: encode(model, teacher, dom, mask)?.patch_tokens(),
    })
}

/// Full i-MAE loss on one batch with an explicit mask.
///
/// The mixed batch is encoded once; `heads.f1` feeds the subordinate branch and
/// `heads.f2` the dominant one. The teacher, when distillation is on, encodes the
/// raw subordinate/dominant images under the same mask and acts as a constant.
#[allow(clippy::too_many_arguments)]
pub fn imae_forward_with_mask(
    model: &BackboneConfig,
    batch: &ImageBatch,
    spec: &MixSpec,
    mask: &MaskSpec,
    student: &ParamStore,
    teacher: Option<&ParamStore>,
    cfg: &LossConfig,
    want_grads: bool,
) -> Result<ForwardOutput> {
    if mask.batch_size() != batch.len() {
        return Err(shape_err("mask and batch sizes differ"));
    }
    let mixed = mix_batch(batch, spec)?;
    let distill = cfg.use_distill && cfg.c > 0.0;
    let teacher_feats = if distill {
        let t = teacher.ok_or_else(|| ImaeError::Config("distillation needs a teacher checkpoint".into()))?;
        Some(teacher_features(model, t, &mixed.sub, &mixed.dom, mask)?)
    } else {
        None
    };

    let mut g = Graph::new();
    let mut b = Binder::new(student);
    let rows = patchify(&mixed.mixed, model.patch_size)?.to_rows();
    let enc = encoder_graph(&mut g, &mut b, model, &rows, mask)?;
    let patch_rows: Vec<usize> = (0..mask.batch_size())
        .flat_map(|bi| (1..enc.tokens_per_sample).map(move |t| bi * enc.tokens_per_sample + t))
        .collect();
    let masked = mask.masked_rows();
    if masked.is_empty() {
        return Err(ImaeError::Numeric("reconstruction loss over zero masked patches".into()));
    }

    let mut branch = |g: &mut Graph, head: &str, images: &ImageBatch, teacher: Option<&Mat>| -> Result<(Var, Option<Var>)> {
        let h = linear(g, &mut b, head, enc.tokens)?;
        let pred = decoder_graph(g, &mut b, model, h, mask)?;
        let recon = g.masked_mse(pred, targets(images, model, cfg.norm_pix_targets)?, masked.clone());
        let distill = teacher.map(|t| {
            let hp = g.gather_rows(h, patch_rows.clone());
            g.mse(hp, t.clone())
        });
        Ok((recon, distill))
    };

    let (recon_sub, distill_sub) = branch(&mut g, HEAD_SUB, &mixed.sub, teacher_feats.as_ref().map(|t| &t.sub))?;
    let mut terms = vec![(recon_sub, 1.0)];
    if let Some(d) = distill_sub {
        terms.push((d, cfg.c));
    }
    let (mut recon_dom, mut distill_dom) = (None, None);
    if cfg.dual_branch {
        let (r, d) = branch(&mut g, HEAD_DOM, &mixed.dom, teacher_feats.as_ref().map(|t| &t.dom))?;
        terms.push((r, 1.0));
        if let Some(d) = d {
            terms.push((d, cfg.c));
        }
        recon_dom = Some(r);
        distill_dom = d;
    }
    let total = g.weighted_sum(&terms);

    let coeff = mixed.sub_coeff;
    let value = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v));
    let report = LossReport {
        recon_sub: g.scalar(recon_sub),
        recon_dom: value(recon_dom),
        distill_sub: value(distill_sub),
        distill_dom: value(distill_dom),
        total: g.scalar(total),
        sub_coeff_mean: coeff.iter().sum::<f64>() / coeff.len().max(1) as f64,
        sub_coeff_min: coeff.iter().copied().fold(f64::INFINITY, f64::min),
        sub_coeff_max: coeff.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    let grads = if want_grads {
        let mut gr = g.backward(total);
        Some(b.collect(&mut gr))
    } else {
        None
    };
    Ok(ForwardOutput { report, grads })
}

/// [`imae_forward_with_mask`] with a freshly sampled mask shared by student and
/// teacher.
#[allow(clippy::too_many_arguments)]
pub fn imae_forward<R: Rng + ?Sized>(
    model: &BackboneConfig,
    batch: &ImageBatch,
    spec: &MixSpec,
    student: &ParamStore,
    teacher: Option<&ParamStore>,
    cfg: &LossConfig,
    want_grads: bool,
    rng: &mut R,
) -> Result<(ForwardOutput, MaskSpec)> {
    let mask = MaskSpec::sample(batch.len(), model.num_patches(), model.mask_ratio, rng)?;
    let out = imae_forward_with_mask(model, batch, spec, &mask, student, teacher, cfg, want_grads)?;
    Ok((out, mask))
}

/// Vanilla single-image MAE loss (teacher pre-training): encoder, decoder, no
/// heads, no mixing.
pub fn mae_forward(
    model: &BackboneConfig,
    batch: &ImageBatch,
    mask: &MaskSpec,
    params: &ParamStore,
    norm_pix: bool,
    want_grads: bool,
) -> Result<ForwardOutput> {
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let rows = patchify(batch, model.patch_size)?.to_rows();
    let enc = encoder_graph(&mut g, &mut b, model, &rows, mask)?;
    let pred = decoder_graph(&mut g, &mut b, model, enc.tokens, mask)?;
    let masked = mask.masked_rows();
    if masked.is_empty() {
        return Err(ImaeError::Numeric("reconstruction loss over zero masked patches".into()));
    }
    let loss = g.masked_mse(pred, targets(batch, model, norm_pix)?, masked);
    let report = LossReport {
        recon_sub: g.scalar(loss),
        total: g.scalar(loss),
        sub_coeff_mean: 1.0,
        sub_coeff_min: 1.0,
        sub_coeff_max: 1.0,
        ..LossReport::default()
    };
    let grads = want_grads.then(|| {
        let mut gr = g.backward(loss);
        b.collect(&mut gr)
    });
    Ok(ForwardOutput { report, grads })
}

/// Student predictions for the subordinate and dominant branches.
pub fn predict_branches(
    model: &BackboneConfig,
    student: &ParamStore,
    mixed: &ImageBatch,
    mask: &MaskSpec,
) -> Result<(PatchTargets, PatchTargets)> {
    let h_m = encode(model, student, mixed, mask)?;
    let (h1, h2) = disentangle(&h_m, student)?;
    Ok((
        crate::backbone::decode(model, student, &h1, mask)?,
        crate::backbone::decode(model, student, &h2, mask)?,
    ))
}

/// Disentangled subordinate patch tokens `[B*V, D]`; identity when the
/// checkpoint has no heads (vanilla MAE).
pub fn subordinate_features(
    model: &BackboneConfig,
    params: &ParamStore,
    images: &ImageBatch,
    mask: &MaskSpec,
) -> Result<Mat> {
    let h = encode(model, params, images, mask)?;
    if params.contains(&format!("{HEAD_SUB}.weight")) {
        Ok(disentangle(&h, params)?.0.patch_tokens())
    } else {
        Ok(h.patch_tokens())
    }
}
