//! Dataset ingestion, patchification, per-patch target normalization and
//! deterministic batch iteration.
//!
//! Images are stored as `[B, H, W, C]` arrays in `[0, 1]`. Patches are laid out in
//! row-major raster order over the patch grid, and pixels inside a patch in
//! `(row, col, channel)` raster order. Every other module relies on this order.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, ImaeError, Result};
use crate::Mat;

/// Stabilizer inside the square root of the per-patch normalization.
pub const NORM_PIX_EPS: f64 = 1e-6;

/// Offset applied to validation ids of the synthetic generator so that the two
/// splits never share an id.
const SYNTHETIC_VAL_ID_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    /// `[B, H, W, C]`, values in `[0, 1]`.
    pub pixels: Array4<f64>,
    pub labels: Option<Vec<usize>>,
    pub ids: Vec<u64>,
}

impl ImageBatch {
    pub fn new(pixels: Array4<f64>, labels: Option<Vec<usize>>, ids: Vec<u64>) -> Result<Self> {
        let b = pixels.shape()[0];
        if ids.len() != b {
            return Err(shape_err(format!("{} ids for a batch of {b}", ids.len())));
        }
        if let Some(l) = &labels {
            if l.len() != b {
                return Err(shape_err(format!("{} labels for a batch of {b}", l.len())));
            }
        }
        Ok(Self { pixels, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(H, W, C)`
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.pixels.shape();
        (s[1], s[2], s[3])
    }

    /// Batch made of the given samples, in the given order.
    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let (h, w, c) = self.image_shape();
        let mut pixels = Array4::zeros((indices.len(), h, w, c));
        for (dst, &src) in indices.iter().enumerate() {
            pixels
                .slice_mut(s![dst, .., .., ..])
                .assign(&self.pixels.slice(s![src, .., .., ..]));
        }
        ImageBatch {
            pixels,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        if self.pixels.iter().any(|v| !v.is_finite()) {
            return Err(ImaeError::Data("non-finite pixel value".into()));
        }
        if let (Some(labels), Some(k)) = (&self.labels, num_classes) {
            if let Some(bad) = labels.iter().find(|&&l| l >= k) {
                return Err(ImaeError::Data(format!("label {bad} outside [0, {k})")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchTargets {
    /// `[B, N, P*P*C]`
    pub patches: Array3<f64>,
    pub normalized: bool,
}

impl PatchTargets {
    pub fn batch_size(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn num_patches(&self) -> usize {
        self.patches.shape()[1]
    }

    pub fn patch_dim(&self) -> usize {
        self.patches.shape()[2]
    }

    /// Flattened `[B*N, P*P*C]` view as an owned matrix.
    pub fn to_rows(&self) -> Mat {
        let (b, n, d) = self.patches.dim();
        self.patches
            .to_owned()
            .into_shape_with_order((b * n, d))
            .expect("contiguous patches")
    }

    pub fn from_rows(rows: &Mat, batch: usize, normalized: bool) -> Result<Self> {
        let (r, d) = rows.dim();
        if batch == 0 || r % batch != 0 {
            return Err(shape_err(format!("{r} rows do not split into {batch} samples")));
        }
        let patches = rows
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((batch, r / batch, d))
            .map_err(|e| shape_err(e.to_string()))?;
        Ok(Self { patches, normalized })
    }
}

fn check_divisible(h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(shape_err(format!(
            "image {h}x{w} is not divisible by patch size {p}"
        )));
    }
    Ok(())
}

pub fn patchify(batch: &ImageBatch, p: usize) -> Result<PatchTargets> {
    let (h, w, c) = batch.image_shape();
    check_divisible(h, w, p)?;
    let (gh, gw) = (h / p, w / p);
    let b = batch.len();
    let mut patches = Array3::zeros((b, gh * gw, p * p * c));
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let n = gy * gw + gx;
                let mut k = 0;
                for i in 0..p {
                    for j in 0..p {
                        for ch in 0..c {
                            patches[[bi, n, k]] = batch.pixels[[bi, gy * p + i, gx * p + j, ch]];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(PatchTargets {
        patches,
        normalized: false,
    })
}

/// Inverse of [`patchify`]. Sample ids and labels are not carried by patches, so
/// the returned batch has sequential ids and no labels.
pub fn unpatchify(targets: &PatchTargets, p: usize, h: usize, w: usize) -> Result<ImageBatch> {
    check_divisible(h, w, p)?;
    let (b, n, d) = targets.patches.dim();
    let (gh, gw) = (h / p, w / p);
    if n != gh * gw || d % (p * p) != 0 || d == 0 {
        return Err(shape_err(format!(
            "{n} patches of length {d} do not tile a {h}x{w} image with patch size {p}"
        )));
    }
    let c = d / (p * p);
    let mut pixels = Array4::zeros((b, h, w, c));
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let n = gy * gw + gx;
                let mut k = 0;
                for i in 0..p {
                    for j in 0..p {
                        for ch in 0..c {
                            pixels[[bi, gy * p + i, gx * p + j, ch]] = targets.patches[[bi, n, k]];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(ImageBatch {
        pixels,
        labels: None,
        ids: (0..b as u64).collect(),
    })
}

/// Per-patch mean and standard deviation (population variance plus
/// [`NORM_PIX_EPS`] under the root), shape `[B, N]` each.
pub fn patch_stats(targets: &PatchTargets) -> (ndarray::Array2<f64>, ndarray::Array2<f64>) {
    let (b, n, d) = targets.patches.dim();
    let mut means = ndarray::Array2::zeros((b, n));
    let mut stds = ndarray::Array2::zeros((b, n));
    for bi in 0..b {
        for ni in 0..n {
            let row = targets.patches.slice(s![bi, ni, ..]);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            means[[bi, ni]] = mean;
            stds[[bi, ni]] = (var + NORM_PIX_EPS).sqrt();
        }
    }
    (means, stds)
}

pub fn normalize_pix(targets: &PatchTargets) -> PatchTargets {
    let (means, stds) = patch_stats(targets);
    let mut patches = targets.patches.clone();
    for ((bi, ni, _), v) in patches.indexed_iter_mut() {
        *v = (*v - means[[bi, ni]]) / stds[[bi, ni]];
    }
    PatchTargets {
        patches,
        normalized: true,
    }
}

/// Undo [`normalize_pix`] with externally supplied statistics.
pub fn denormalize_pix(
    targets: &PatchTargets,
    means: &ndarray::Array2<f64>,
    stds: &ndarray::Array2<f64>,
) -> PatchTargets {
    let mut patches = targets.patches.clone();
    for ((bi, ni, _), v) in patches.indexed_iter_mut() {
        *v = *v * stds[[bi, ni]] + means[[bi, ni]];
    }
    PatchTargets {
        patches,
        normalized: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    #[serde(default)]
    pub random_resized_crop: bool,
    #[serde(default)]
    pub hflip: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// `"synthetic"` or a directory-backed dataset name.
    pub name: String,
    #[serde(default)]
    pub root: String,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_num_train")]
    pub num_train: usize,
    #[serde(default = "default_num_val")]
    pub num_val: usize,
    /// Seed of the synthetic generator (independent of the training seed).
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub augment: Augment,
}

fn default_image_size() -> usize {
    32
}
fn default_num_classes() -> usize {
    10
}
fn default_num_train() -> usize {
    5000
}
fn default_num_val() -> usize {
    1000
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            root: String::new(),
            image_size: default_image_size(),
            num_classes: default_num_classes(),
            num_train: default_num_train(),
            num_val: default_num_val(),
            seed: 0,
            augment: Augment::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = ImaeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(ImaeError::Config(format!(
                "unknown split {other:?} (expected train or val)"
            ))),
        }
    }
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// An in-memory labelled image collection.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
    pub num_classes: usize,
    pub augment: Augment,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn batch(&self, indices: &[usize]) -> ImageBatch {
        let (h, w, c) = self.image_shape();
        let mut pixels = Array4::zeros((indices.len(), h, w, c));
        for (dst, &src) in indices.iter().enumerate() {
            pixels
                .slice_mut(s![dst, .., .., ..])
                .assign(&self.images.slice(s![src, .., .., ..]));
        }
        ImageBatch {
            pixels,
            labels: Some(indices.iter().map(|&i| self.labels[i]).collect()),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let b = self.batch(&idx);
        Dataset {
            images: b.pixels,
            labels: b.labels.unwrap_or_default(),
            ids: b.ids,
            num_classes: self.num_classes,
            augment: self.augment,
        }
    }

    pub fn batches_per_epoch(&self, batch_size: usize, drop_last: bool) -> usize {
        if batch_size == 0 {
            return 0;
        }
        if drop_last {
            self.len() / batch_size
        } else {
            self.len().div_ceil(batch_size)
        }
    }

    /// Sample order for one epoch, a pure function of `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: u64, shuffle: bool) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x0e90c4, epoch]));
            order.shuffle(&mut rng);
        }
        order
    }

    /// Deterministic batch iterator. Augmentation, when enabled on the dataset,
    /// draws from a generator derived from `(seed, epoch, batch index)`.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64, shuffle: bool, drop_last: bool) -> BatchIter<'_> {
        BatchIter {
            data: self,
            order: self.epoch_order(seed, epoch, shuffle),
            batch_size: batch_size.max(1),
            drop_last,
            pos: 0,
            seed,
            epoch,
            index: 0,
        }
    }

    /// The `index`-th batch of an epoch, equal to the `index`-th item of
    /// [`Dataset::batches`] with `drop_last = true`.
    pub fn epoch_batch(&self, batch_size: usize, seed: u64, epoch: u64, index: usize) -> ImageBatch {
        let order = self.epoch_order(seed, epoch, true);
        let idx = &order[index * batch_size..(index + 1) * batch_size];
        let batch = self.batch(idx);
        apply_augment(batch, self.augment, seed, epoch, index as u64)
    }
}

pub struct BatchIter<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    drop_last: bool,
    pos: usize,
    seed: u64,
    epoch: u64,
    index: u64,
}

impl Iterator for BatchIter<'_> {
    type Item = ImageBatch;

    fn next(&mut self) -> Option<ImageBatch> {
        let remaining = self.order.len() - self.pos;
        if remaining == 0 || (self.drop_last && remaining < self.batch_size) {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.data.batch(&self.order[self.pos..end]);
        self.pos = end;
        let batch = apply_augment(batch, self.data.augment, self.seed, self.epoch, self.index);
        self.index += 1;
        Some(batch)
    }
}

fn apply_augment(mut batch: ImageBatch, aug: Augment, seed: u64, epoch: u64, index: u64) -> ImageBatch {
    if !aug.hflip && !aug.random_resized_crop {
        return batch;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xa06, epoch, index]));
    let (h, w, c) = batch.image_shape();
    for b in 0..batch.len() {
        let img = batch.pixels.slice(s![b, .., .., ..]).to_owned();
        let mut out = if aug.random_resized_crop {
            random_resized_crop(&img, &mut rng)
        } else {
            img
        };
        if aug.hflip && rng.random_bool(0.5) {
            out = out.slice(s![.., ..;-1, ..]).to_owned();
        }
        debug_assert_eq!(out.dim(), (h, w, c));
        batch.pixels.slice_mut(s![b, .., .., ..]).assign(&out);
    }
    batch
}

/// Crop of random area in `[0.2, 1]` and aspect ratio in `[3/4, 4/3]`, resized
/// bilinearly back to the original size.
fn random_resized_crop(img: &Array3<f64>, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (h, w, c) = img.dim();
    let area = (h * w) as f64;
    let mut crop = (0.0, 0.0, h as f64, w as f64);
    for _ in 0..10 {
        let target = area * rng.random_range(0.2..=1.0);
        let log_ratio = rng.random_range((0.75f64).ln()..=(4.0f64 / 3.0).ln());
        let ratio = log_ratio.exp();
        let cw = (target * ratio).sqrt();
        let ch = (target / ratio).sqrt();
        if cw <= w as f64 && ch <= h as f64 {
            let y0 = rng.random_range(0.0..=(h as f64 - ch));
            let x0 = rng.random_range(0.0..=(w as f64 - cw));
            crop = (y0, x0, ch, cw);
            break;
        }
    }
    let (y0, x0, ch, cw) = crop;
    let mut out = Array3::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            let sy = (y0 + (i as f64 + 0.5) * ch / h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let sx = (x0 + (j as f64 + 0.5) * cw / w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (iy, ix) = (sy.floor() as usize, sx.floor() as usize);
            let (iy1, ix1) = ((iy + 1).min(h - 1), (ix + 1).min(w - 1));
            let (fy, fx) = (sy - iy as f64, sx - ix as f64);
            for k in 0..c {
                out[[i, j, k]] = (1.0 - fy) * ((1.0 - fx) * img[[iy, ix, k]] + fx * img[[iy, ix1, k]])
                    + fy * ((1.0 - fx) * img[[iy1, ix, k]] + fx * img[[iy1, ix1, k]]);
            }
        }
    }
    out
}

/// SplitMix64-style mixing of a base seed with a stream of tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut z = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        z = z.wrapping_add(t).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// Load a split. `"synthetic"` needs no files; any other name reads
/// `<root>/<split>/<class_name>/<image files>`.
pub fn load_dataset(cfg: &DataConfig, split: Split) -> Result<Dataset> {
    let ds = if cfg.name == "synthetic" {
        synthetic(cfg, split)
    } else {
        load_image_folder(Path::new(&cfg.root), split, cfg.image_size)?
    };
    Ok(Dataset {
        augment: if split == Split::Train { cfg.augment } else { Augment::default() },
        ..ds
    })
}

/// Periodic colour textures. Each class owns a wave vector and a colour tint;
/// every sample adds a weaker distractor texture of a random other class, a
/// smooth brightness ramp and pixel noise, all seeded by `(cfg.seed, id)`.
///
/// Wave vectors are multiples of a quarter cycle per pixel, so with 4-pixel
/// patches every patch of an image sees the same local phase: masked patches are
/// predictable from visible ones, which keeps reconstruction learnable at desk
/// scale.
pub fn synthetic(cfg: &DataConfig, split: Split) -> Dataset {
    let n = match split {
        Split::Train => cfg.num_train,
        Split::Val => cfg.num_val,
    };
    let k = cfg.num_classes.max(1);
    let size = cfg.image_size;
    let classes: Vec<SyntheticClass> = (0..k).map(|c| SyntheticClass::new(cfg.seed, c)).collect();
    let offset = match split {
        Split::Train => 0,
        Split::Val => SYNTHETIC_VAL_ID_OFFSET,
    };
    let mut images = Array4::zeros((n, size, size, 3));
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let id = offset + i as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x5e7, id]));
        let label = rng.random_range(0..k);
        let cls = &classes[label];
        let other = &classes[(label + rng.random_range(1..k.max(2))) % k];
        let phase = rng.random_range(0.0..2.0 * PI);
        let other_phase = rng.random_range(0.0..2.0 * PI);
        let contrast = rng.random_range(0.2..0.3);
        let other_contrast = contrast * rng.random_range(0.0..DISTRACTOR_MAX);
        let shift = rng.random_range(-0.1..0.1);
        let (ramp_x, ramp_y) = (rng.random_range(-RAMP..RAMP), rng.random_range(-RAMP..RAMP));
        for y in 0..size {
            for x in 0..size {
                let wave = cls.wave(x, y, phase);
                let distractor = if k > 1 { other.wave(x, y, other_phase) } else { 0.0 };
                let ramp = (ramp_x * x as f64 + ramp_y * y as f64) / size as f64;
                for ch in 0..3 {
                    let noise = rng.random_range(-NOISE..NOISE);
                    let v = 0.5
                        + shift
                        + ramp
                        + contrast * wave * cls.tint[ch]
                        + other_contrast * distractor * other.tint[ch]
                        + noise;
                    images[[i, y, x, ch]] = v.clamp(0.0, 1.0);
                }
            }
        }
        labels.push(label);
        ids.push(id);
    }
    Dataset {
        images,
        labels,
        ids,
        num_classes: k,
        augment: Augment::default(),
    }
}

/// Distinct (up to sign and aliasing) wave vectors on the quarter-cycle grid, in
/// cycles per pixel.
const WAVE_VECTORS: [(f64, f64); 9] = [
    (0.25, 0.0),
    (0.0, 0.25),
    (0.25, 0.25),
    (0.25, -0.25),
    (0.5, 0.0),
    (0.0, 0.5),
    (0.5, 0.5),
    (0.5, 0.25),
    (0.25, 0.5),
];
const DISTRACTOR_MAX: f64 = 0.6;
const RAMP: f64 = 0.1;
const NOISE: f64 = 0.02;

struct SyntheticClass {
    wave_vector: (f64, f64),
    tint: [f64; 3],
}

impl SyntheticClass {
    /// Classes beyond the number of wave vectors reuse them with other tints.
    fn new(seed: u64, c: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xc1a55, c as u64]));
        let tint = [
            rng.random_range(0.4..1.0),
            rng.random_range(0.4..1.0),
            rng.random_range(0.4..1.0),
        ];
        Self {
            wave_vector: WAVE_VECTORS[c % WAVE_VECTORS.len()],
            tint,
        }
    }

    fn wave(&self, x: usize, y: usize, phase: f64) -> f64 {
        let (kx, ky) = self.wave_vector;
        (2.0 * PI * (kx * x as f64 + ky * y as f64) + phase).cos()
    }
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp" | "ppm")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

pub fn load_image_folder(root: &Path, split: Split, image_size: usize) -> Result<Dataset> {
    let split_dir = root.join(split.as_str());
    if !split_dir.is_dir() {
        return Err(ImaeError::MissingData(format!(
            "{} not found; expected <root>/{}/<class_name>/<image files>, or set dataset.name=synthetic",
            split_dir.display(),
            split.as_str()
        )));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(&split_dir)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.is_empty() {
        return Err(ImaeError::MissingData(format!(
            "no class directories under {}",
            split_dir.display()
        )));
    }
    let mut files = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        for f in sorted_entries(dir)?.into_iter().filter(|p| is_image_file(p)) {
            files.push((label, f));
        }
    }
    if files.is_empty() {
        return Err(ImaeError::MissingData(format!(
            "no image files under {}",
            split_dir.display()
        )));
    }
    let mut images = Array4::zeros((files.len(), image_size, image_size, 3));
    let mut labels = Vec::with_capacity(files.len());
    let mut ids = Vec::with_capacity(files.len());
    for (i, (label, path)) in files.iter().enumerate() {
        let mut img = image::open(path)?.to_rgb8();
        if img.width() as usize != image_size || img.height() as usize != image_size {
            img = image::imageops::resize(
                &img,
                image_size as u32,
                image_size as u32,
                image::imageops::FilterType::Triangle,
            );
        }
        for (x, y, px) in img.enumerate_pixels() {
            for ch in 0..3 {
                images[[i, y as usize, x as usize, ch]] = px[ch] as f64 / 255.0;
            }
        }
        let rel = path.strip_prefix(root).unwrap_or(path);
        let digest = Sha256::digest(rel.to_string_lossy().as_bytes());
        ids.push(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")));
        labels.push(*label);
    }
    Ok(Dataset {
        images,
        labels,
        ids,
        num_classes: class_dirs.len(),
        augment: Augment::default(),
    })
}
