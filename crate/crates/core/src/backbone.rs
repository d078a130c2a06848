//! ViT encoder, lightweight shared decoder and MAE-style random masking.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{patchify, ImageBatch, PatchTargets};
use crate::error::{shape_err, ImaeError, Result};
use crate::params::{trunc_normal, xavier_uniform, Binder, ParamStore};
use crate::Mat;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Gradient-check size: D=8, depth 2, decoder depth 1.
    Nano,
    /// CI size: D=64, depth 4.
    Micro,
    /// ViT-Tiny-like encoder with a 4-block decoder.
    Tiny,
}

impl std::str::FromStr for Profile {
    type Err = ImaeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nano" => Ok(Profile::Nano),
            "micro" => Ok(Profile::Micro),
            "tiny" => Ok(Profile::Tiny),
            other => Err(ImaeError::Config(format!("unknown model profile {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    /// Fixed affine standardization of input pixels, `(x - mean) / std`, applied
    /// before the patch embedding (reconstruction targets are unaffected).
    #[serde(default = "default_input_mean")]
    pub input_mean: f64,
    #[serde(default = "default_input_std")]
    pub input_std: f64,
}

fn default_input_mean() -> f64 {
    0.5
}
fn default_input_std() -> f64 {
    0.25
}

impl BackboneConfig {
    pub fn from_profile(profile: Profile, image_size: usize, mask_ratio: f64) -> Self {
        let (patch_size, embed_dim, depth, num_heads, decoder_depth, decoder_heads) = match profile {
            Profile::Nano => (4, 8, 2, 2, 1, 1),
            Profile::Micro => (4, 64, 4, 4, 2, 2),
            Profile::Tiny => (4, 192, 12, 3, 4, 3),
        };
        Self {
            image_size,
            channels: 3,
            patch_size,
            embed_dim,
            depth,
            num_heads,
            decoder_dim: embed_dim / 2,
            decoder_depth,
            decoder_heads,
            mlp_ratio: 4,
            mask_ratio,
            input_mean: default_input_mean(),
            input_std: default_input_std(),
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn num_masked(&self) -> usize {
        (self.mask_ratio * self.num_patches() as f64).round() as usize
    }

    pub fn num_visible(&self) -> usize {
        self.num_patches().saturating_sub(self.num_masked())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ImaeError::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return err(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return err(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.num_heads));
        }
        if self.decoder_heads == 0 || !self.decoder_dim.is_multiple_of(self.decoder_heads) {
            return err(format!(
                "decoder_dim {} not divisible by {} heads",
                self.decoder_dim, self.decoder_heads
            ));
        }
        if !self.embed_dim.is_multiple_of(4) || !self.decoder_dim.is_multiple_of(4) {
            return err("sin-cos position embeddings need widths divisible by 4".into());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return err(format!("mask_ratio must lie in (0, 1), got {}", self.mask_ratio));
        }
        if !(self.input_std > 0.0 && self.input_std.is_finite() && self.input_mean.is_finite()) {
            return err(format!("input_std must be positive, got {}", self.input_std));
        }
        masked_count(self.num_patches(), self.mask_ratio)?;
        Ok(())
    }
}

fn masked_count(n: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(ImaeError::Config(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let masked = (ratio * n as f64).round() as usize;
    if masked == 0 {
        return Err(ImaeError::Config(format!("mask ratio {ratio} masks no patch of {n}")));
    }
    if masked >= n {
        return Err(ImaeError::Config(format!("mask ratio {ratio} leaves no visible patch of {n}")));
    }
    Ok(masked)
}

/// Per-sample random masking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    /// `[B, V]` indices of kept patches, in shuffled order.
    pub ids_keep: Array2<usize>,
    /// `[B, N]` position of each patch in the shuffled order.
    pub ids_restore: Array2<usize>,
    /// `[B, N]`, 1 = masked.
    pub mask: Array2<u8>,
}

impl MaskSpec {
    pub fn sample<R: Rng + ?Sized>(batch: usize, n: usize, ratio: f64, rng: &mut R) -> Result<Self> {
        let keep = n - masked_count(n, ratio)?;
        let mut shuffles = Vec::with_capacity(batch);
        for _ in 0..batch {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            shuffles.push(order);
        }
        Ok(Self::from_shuffles(&shuffles, keep))
    }

    /// Every patch visible, in natural order.
    pub fn full(batch: usize, n: usize) -> Self {
        let order: Vec<usize> = (0..n).collect();
        Self::from_shuffles(&vec![order; batch], n)
    }

    fn from_shuffles(shuffles: &[Vec<usize>], keep: usize) -> Self {
        let b = shuffles.len();
        let n = shuffles.first().map_or(0, Vec::len);
        let mut ids_keep = Array2::zeros((b, keep));
        let mut ids_restore = Array2::zeros((b, n));
        let mut mask = Array2::ones((b, n));
        for (bi, order) in shuffles.iter().enumerate() {
            for (pos, &patch) in order.iter().enumerate() {
                ids_restore[[bi, patch]] = pos;
                if pos < keep {
                    ids_keep[[bi, pos]] = patch;
                    mask[[bi, patch]] = 0;
                }
            }
        }
        Self {
            ids_keep,
            ids_restore,
            mask,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.ids_restore.nrows()
    }

    pub fn num_patches(&self) -> usize {
        self.ids_restore.ncols()
    }

    pub fn num_visible(&self) -> usize {
        self.ids_keep.ncols()
    }

    /// Row indices into a stacked `[B*N, ...]` matrix of the masked patches.
    pub fn masked_rows(&self) -> Vec<usize> {
        let n = self.num_patches();
        self.mask
            .indexed_iter()
            .filter(|(_, &m)| m == 1)
            .map(|((b, i), _)| b * n + i)
            .collect()
    }

    /// Row indices into a stacked `[B*N, ...]` matrix of the kept patches, in
    /// shuffled order.
    pub fn keep_rows(&self) -> Vec<usize> {
        let n = self.num_patches();
        self.ids_keep
            .indexed_iter()
            .map(|((b, _), &p)| b * n + p)
            .collect()
    }
}

/// Gather the visible tokens of `[B, N, D]` input and return them with the mask.
pub fn random_mask<R: Rng + ?Sized>(
    tokens: &ndarray::Array3<f64>,
    ratio: f64,
    rng: &mut R,
) -> Result<(ndarray::Array3<f64>, MaskSpec)> {
    let (b, n, d) = tokens.dim();
    let spec = MaskSpec::sample(b, n, ratio, rng)?;
    let v = spec.num_visible();
    let mut visible = ndarray::Array3::zeros((b, v, d));
    for bi in 0..b {
        for j in 0..v {
            visible
                .slice_mut(ndarray::s![bi, j, ..])
                .assign(&tokens.slice(ndarray::s![bi, spec.ids_keep[[bi, j]], ..]));
        }
    }
    Ok((visible, spec))
}

/// Encoder (or decoder input) token features, samples stacked along rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    /// `[B*T, D]`; with a class token, it is the first of each sample's `T` rows.
    pub tokens: Mat,
    pub batch: usize,
    pub tokens_per_sample: usize,
    pub includes_cls: bool,
}

impl FeatureSet {
    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn patch_token_rows(&self) -> Vec<usize> {
        let skip = usize::from(self.includes_cls);
        (0..self.batch)
            .flat_map(|b| (skip..self.tokens_per_sample).map(move |t| b * self.tokens_per_sample + t))
            .collect()
    }

    /// `[B*V, D]` patch tokens without the class token.
    pub fn patch_tokens(&self) -> Mat {
        self.tokens.select(Axis(0), &self.patch_token_rows())
    }

    /// `[B, D]` class tokens.
    pub fn cls_tokens(&self) -> Option<Mat> {
        self.includes_cls.then(|| {
            let rows: Vec<usize> = (0..self.batch).map(|b| b * self.tokens_per_sample).collect();
            self.tokens.select(Axis(0), &rows)
        })
    }

    /// `[B, D]` mean of the patch tokens of each sample.
    pub fn mean_patch_tokens(&self) -> Mat {
        let skip = usize::from(self.includes_cls);
        let t = self.tokens_per_sample - skip;
        let mut out = Array2::zeros((self.batch, self.dim()));
        for b in 0..self.batch {
            let start = b * self.tokens_per_sample + skip;
            let block = self.tokens.slice(ndarray::s![start..start + t, ..]);
            out.row_mut(b).assign(&block.mean_axis(Axis(0)).expect("non-empty"));
        }
        out
    }
}

/// 1-D sin-cos embedding of `positions` into `dim` channels.
fn sincos_1d(dim: usize, positions: &[f64]) -> Mat {
    let half = dim / 2;
    let mut out = Array2::zeros((positions.len(), dim));
    for (r, &p) in positions.iter().enumerate() {
        for i in 0..half {
            let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
            out[[r, i]] = (p * omega).sin();
            out[[r, half + i]] = (p * omega).cos();
        }
    }
    out
}

/// Fixed 2-D sin-cos position embedding `[grid*grid, dim]` in raster order.
pub fn sincos_2d(dim: usize, grid: usize) -> Mat {
    let ys: Vec<f64> = (0..grid * grid).map(|i| (i / grid) as f64).collect();
    let xs: Vec<f64> = (0..grid * grid).map(|i| (i % grid) as f64).collect();
    let ey = sincos_1d(dim / 2, &ys);
    let ex = sincos_1d(dim / 2, &xs);
    ndarray::concatenate(Axis(1), &[ey.view(), ex.view()]).expect("same rows")
}

fn init_linear<R: Rng + ?Sized>(p: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    p.insert(format!("{name}.weight"), xavier_uniform(rng, fan_in, fan_out));
    p.insert(format!("{name}.bias"), Array2::zeros((1, fan_out)));
}

fn init_norm(p: &mut ParamStore, name: &str, dim: usize) {
    p.insert(format!("{name}.weight"), Array2::ones((1, dim)));
    p.insert(format!("{name}.bias"), Array2::zeros((1, dim)));
}

fn init_block<R: Rng + ?Sized>(p: &mut ParamStore, prefix: &str, dim: usize, mlp_ratio: usize, rng: &mut R) {
    init_norm(p, &format!("{prefix}.norm1"), dim);
    init_linear(p, &format!("{prefix}.attn.qkv"), dim, 3 * dim, rng);
    init_linear(p, &format!("{prefix}.attn.proj"), dim, dim, rng);
    init_norm(p, &format!("{prefix}.norm2"), dim);
    init_linear(p, &format!("{prefix}.mlp.fc1"), dim, mlp_ratio * dim, rng);
    init_linear(p, &format!("{prefix}.mlp.fc2"), mlp_ratio * dim, dim, rng);
}

/// Fresh encoder and decoder parameters.
pub fn init_backbone<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> ParamStore {
    let mut p = ParamStore::new();
    let d = cfg.embed_dim;
    init_linear(&mut p, "encoder.patch_embed", cfg.patch_dim(), d, rng);
    p.insert("encoder.cls_token", trunc_normal(rng, 1, d, INIT_STD));
    for i in 0..cfg.depth {
        init_block(&mut p, &format!("encoder.blocks.{i}"), d, cfg.mlp_ratio, rng);
    }
    init_norm(&mut p, "encoder.norm", d);

    let dd = cfg.decoder_dim;
    init_linear(&mut p, "decoder.embed", d, dd, rng);
    p.insert("decoder.mask_token", Array2::zeros((1, dd)));
    for i in 0..cfg.decoder_depth {
        init_block(&mut p, &format!("decoder.blocks.{i}"), dd, cfg.mlp_ratio, rng);
    }
    init_norm(&mut p, "decoder.norm", dd);
    init_linear(&mut p, "decoder.pred", dd, cfg.patch_dim(), rng);
    p
}

pub(crate) fn linear(g: &mut Graph, b: &mut Binder, name: &str, x: Var) -> Result<Var> {
    let w = b.get(g, &format!("{name}.weight"))?;
    let bias = b.get(g, &format!("{name}.bias"))?;
    let y = g.matmul(x, w);
    Ok(g.add_row(y, bias))
}

fn norm(g: &mut Graph, b: &mut Binder, name: &str, x: Var) -> Result<Var> {
    let w = b.get(g, &format!("{name}.weight"))?;
    let bias = b.get(g, &format!("{name}.bias"))?;
    Ok(g.layer_norm(x, w, bias))
}

/// Pre-norm transformer block. Returns the output and the attention node.
fn block(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var, seq_len: usize, heads: usize) -> Result<(Var, Var)> {
    let h = norm(g, b, &format!("{prefix}.norm1"), x)?;
    let qkv = linear(g, b, &format!("{prefix}.attn.qkv"), h)?;
    let attn = g.attention(qkv, seq_len, heads);
    let proj = linear(g, b, &format!("{prefix}.attn.proj"), attn)?;
    let x = g.add(x, proj);
    let h = norm(g, b, &format!("{prefix}.norm2"), x)?;
    let f = linear(g, b, &format!("{prefix}.mlp.fc1"), h)?;
    let f = g.gelu(f);
    let f = linear(g, b, &format!("{prefix}.mlp.fc2"), f)?;
    Ok((g.add(x, f), attn))
}

fn tile_rows(m: &Mat, times: usize, leading_zero_row: bool) -> Mat {
    let rows_per = m.nrows() + usize::from(leading_zero_row);
    let mut out = Array2::zeros((rows_per * times, m.ncols()));
    for t in 0..times {
        let start = t * rows_per + usize::from(leading_zero_row);
        out.slice_mut(ndarray::s![start..start + m.nrows(), ..]).assign(m);
    }
    out
}

/// Graph-level encoder output.
pub struct EncoderNodes {
    /// `[B*(V+1), D]` after the final norm, class token first in each sample.
    pub tokens: Var,
    pub tokens_per_sample: usize,
    pub attention: Vec<Var>,
}

/// Encoder forward on `[B*N, P*P*C]` patch rows.
pub fn encoder_graph(
    g: &mut Graph,
    b: &mut Binder,
    cfg: &BackboneConfig,
    patch_rows: &Mat,
    mask: &MaskSpec,
) -> Result<EncoderNodes> {
    let n = cfg.num_patches();
    let batch = mask.batch_size();
    if patch_rows.dim() != (batch * n, cfg.patch_dim()) || mask.num_patches() != n {
        return Err(shape_err(format!(
            "encoder expects {}x{} patch rows for {batch} samples of {n} patches, got {:?}",
            batch * n,
            cfg.patch_dim(),
            patch_rows.dim()
        )));
    }
    let d = cfg.embed_dim;
    let x = g.leaf(patch_rows.mapv(|v| (v - cfg.input_mean) / cfg.input_std));
    let x = linear(g, b, "encoder.patch_embed", x)?;
    let x = g.add_const(x, &tile_rows(&sincos_2d(d, cfg.grid()), batch, false));
    let visible = g.gather_rows(x, mask.keep_rows());
    let cls = b.get(g, "encoder.cls_token")?;
    let stacked = g.concat_rows(&[visible, cls]);
    let v = mask.num_visible();
    let cls_row = batch * v;
    let order: Vec<usize> = (0..batch)
        .flat_map(|bi| std::iter::once(cls_row).chain((0..v).map(move |j| bi * v + j)))
        .collect();
    let mut x = g.gather_rows(stacked, order);
    let mut attention = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let (y, a) = block(g, b, &format!("encoder.blocks.{i}"), x, v + 1, cfg.num_heads)?;
        x = y;
        attention.push(a);
    }
    let tokens = norm(g, b, "encoder.norm", x)?;
    Ok(EncoderNodes {
        tokens,
        tokens_per_sample: v + 1,
        attention,
    })
}

/// Decoder forward on `[B*(V+1), D]` tokens; returns `[B*N, P*P*C]` predictions.
pub fn decoder_graph(g: &mut Graph, b: &mut Binder, cfg: &BackboneConfig, tokens: Var, mask: &MaskSpec) -> Result<Var> {
    let batch = mask.batch_size();
    let n = mask.num_patches();
    let v = mask.num_visible();
    let rows = g.value(tokens).nrows();
    if rows != batch * (v + 1) || g.value(tokens).ncols() != cfg.embed_dim {
        return Err(shape_err(format!(
            "decoder expects {}x{} tokens, got {:?}",
            batch * (v + 1),
            cfg.embed_dim,
            g.value(tokens).dim()
        )));
    }
    let e = linear(g, b, "decoder.embed", tokens)?;
    let mask_token = b.get(g, "decoder.mask_token")?;
    let stacked = g.concat_rows(&[e, mask_token]);
    let mask_row = rows;
    let mut order = Vec::with_capacity(batch * (n + 1));
    for bi in 0..batch {
        order.push(bi * (v + 1));
        for p in 0..n {
            let r = mask.ids_restore[[bi, p]];
            order.push(if r < v { bi * (v + 1) + 1 + r } else { mask_row });
        }
    }
    let x = g.gather_rows(stacked, order);
    let mut x = g.add_const(x, &tile_rows(&sincos_2d(cfg.decoder_dim, cfg.grid()), batch, true));
    for i in 0..cfg.decoder_depth {
        x = block(g, b, &format!("decoder.blocks.{i}"), x, n + 1, cfg.decoder_heads)?.0;
    }
    let x = norm(g, b, "decoder.norm", x)?;
    let pred = linear(g, b, "decoder.pred", x)?;
    let patch_rows: Vec<usize> = (0..batch)
        .flat_map(|bi| (1..=n).map(move |p| bi * (n + 1) + p))
        .collect();
    Ok(g.gather_rows(pred, patch_rows))
}

fn check_images(cfg: &BackboneConfig, images: &ImageBatch) -> Result<()> {
    let (h, w, c) = images.image_shape();
    if h != cfg.image_size || w != cfg.image_size || c != cfg.channels {
        return Err(shape_err(format!(
            "model expects {0}x{0}x{1} images, got {h}x{w}x{c}",
            cfg.image_size, cfg.channels
        )));
    }
    Ok(())
}

/// Encoder features of the visible patches (plus class token), without gradients.
pub fn encode(cfg: &BackboneConfig, params: &ParamStore, images: &ImageBatch, mask: &MaskSpec) -> Result<FeatureSet> {
    check_images(cfg, images)?;
    let rows = patchify(images, cfg.patch_size)?.to_rows();
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let out = encoder_graph(&mut g, &mut b, cfg, &rows, mask)?;
    Ok(FeatureSet {
        tokens: g.value(out.tokens).clone(),
        batch: mask.batch_size(),
        tokens_per_sample: out.tokens_per_sample,
        includes_cls: true,
    })
}

/// Decoder predictions for every patch, without gradients.
pub fn decode(cfg: &BackboneConfig, params: &ParamStore, h: &FeatureSet, mask: &MaskSpec) -> Result<PatchTargets> {
    if !h.includes_cls || h.tokens_per_sample != mask.num_visible() + 1 || h.batch != mask.batch_size() {
        return Err(shape_err("feature set does not match the mask"));
    }
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let t = g.leaf(h.tokens.clone());
    let pred = decoder_graph(&mut g, &mut b, cfg, t, mask)?;
    PatchTargets::from_rows(g.value(pred), h.batch, false)
}

/// Post-softmax attention of one encoder layer/head on an unmasked forward pass
/// of a single image; `[N+1, N+1]` with the class token first.
pub fn attention_map(cfg: &BackboneConfig, params: &ParamStore, image: &ImageBatch, layer: usize, head: usize) -> Result<Mat> {
    if layer >= cfg.depth || head >= cfg.num_heads {
        return Err(ImaeError::Index(format!(
            "layer {layer}/head {head} outside {} layers x {} heads",
            cfg.depth, cfg.num_heads
        )));
    }
    if image.len() != 1 {
        return Err(shape_err(format!("attention_map takes one image, got {}", image.len())));
    }
    check_images(cfg, image)?;
    let rows = patchify(image, cfg.patch_size)?.to_rows();
    let mask = MaskSpec::full(1, cfg.num_patches());
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let out = encoder_graph(&mut g, &mut b, cfg, &rows, &mask)?;
    Ok(g
        .attention_probs(out.attention[layer], 0, head)
        .expect("recorded attention")
        .clone())
}
