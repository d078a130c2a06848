//! Pixel-level mixing of image pairs and semantics-enhanced pairing.

use std::collections::BTreeMap;

use ndarray::{s, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{shape_err, ImaeError, Result};

/// Sampled mix factors closer than this to 0 or 1 are redrawn.
pub const ALPHA_CLAMP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixConfig {
    /// Shape parameter `b` of the symmetric `Beta(b, b)` mix-factor sampler.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub fixed_alpha: Option<f64>,
    /// Fraction of pairs drawn from the same class. `None` pairs images by an
    /// unconstrained random derangement.
    #[serde(default)]
    pub same_class_ratio: Option<f64>,
}

fn default_beta() -> f64 {
    1.0
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            beta: default_beta(),
            fixed_alpha: None,
            same_class_ratio: None,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(ImaeError::Config(format!("mix.beta must be > 0, got {}", self.beta)));
        }
        if let Some(a) = self.fixed_alpha {
            if !(a > 0.0 && a <= 0.5) {
                return Err(ImaeError::Config(format!(
                    "mix.fixed_alpha must lie in (0, 0.5], got {a}"
                )));
            }
        }
        if let Some(r) = self.same_class_ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(ImaeError::Config(format!(
                    "mix.same_class_ratio must lie in [0, 1], got {r}"
                )));
            }
        }
        Ok(())
    }
}

/// Everything needed to replay the mixing of one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub perm: Vec<usize>,
    /// Coefficient of `batch[i]`; `batch[perm[i]]` gets `1 - alpha[i]`.
    pub alpha: Vec<f64>,
    pub sub_is_first: Vec<bool>,
    pub same_class: Vec<bool>,
    /// Number of pairing constraints that could not be met (see [`semantic_pairing`]).
    #[serde(default)]
    pub pairing_warnings: usize,
}

impl MixSpec {
    /// Build a spec from an explicit permutation and mix factors.
    pub fn new(perm: Vec<usize>, alpha: Vec<f64>, labels: Option<&[usize]>) -> Result<Self> {
        if perm.len() != alpha.len() {
            return Err(shape_err(format!(
                "permutation of length {} with {} mix factors",
                perm.len(),
                alpha.len()
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(shape_err("pairing is not a permutation"));
            }
        }
        let same_class = match labels {
            Some(l) if l.len() == perm.len() => perm.iter().enumerate().map(|(i, &p)| l[i] == l[p]).collect(),
            Some(l) => return Err(shape_err(format!("{} labels for {} pairs", l.len(), perm.len()))),
            None => vec![false; perm.len()],
        };
        Ok(Self {
            sub_is_first: alpha.iter().map(|&a| a <= 0.5).collect(),
            perm,
            alpha,
            same_class,
            pairing_warnings: 0,
        })
    }

    /// Sample mix factors and a pairing for `batch` according to `cfg`.
    pub fn sample<R: Rng + ?Sized>(batch: &ImageBatch, cfg: &MixConfig, rng: &mut R) -> Result<Self> {
        let b = batch.len();
        let alpha = sample_alpha(cfg, b, rng);
        let (perm, warnings) = match cfg.same_class_ratio {
            Some(r) => {
                let labels = batch.labels.as_deref().ok_or_else(|| {
                    ImaeError::Data("semantics-enhanced sampling needs labels".into())
                })?;
                let out = semantic_pairing(labels, r, rng)?;
                (out.perm, out.warnings)
            }
            None => (random_derangement(b, rng), 0),
        };
        let mut spec = MixSpec::new(perm, alpha, batch.labels.as_deref())?;
        spec.pairing_warnings = warnings;
        Ok(spec)
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Mix coefficient of the subordinate image, `min(alpha, 1 - alpha)`.
    pub fn sub_coeff(&self) -> Vec<f64> {
        self.alpha.iter().map(|&a| a.min(1.0 - a)).collect()
    }

    /// Sample indices of the subordinate and dominant image of each pair.
    pub fn sub_dom_indices(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.len())
            .map(|i| {
                if self.sub_is_first[i] {
                    (i, self.perm[i])
                } else {
                    (self.perm[i], i)
                }
            })
            .unzip()
    }
}

pub fn sample_alpha<R: Rng + ?Sized>(cfg: &MixConfig, n: usize, rng: &mut R) -> Vec<f64> {
    if let Some(a) = cfg.fixed_alpha {
        return vec![a; n];
    }
    let beta = Beta::new(cfg.beta, cfg.beta).expect("validated beta parameter");
    (0..n)
        .map(|_| loop {
            let a = beta.sample(rng);
            if a > ALPHA_CLAMP && a < 1.0 - ALPHA_CLAMP {
                break a;
            }
        })
        .collect()
}

/// Uniform random permutation without fixed points (identity for `n < 2`).
pub fn random_derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    if n < 2 {
        return (0..n).collect();
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pairing {
    pub perm: Vec<usize>,
    /// Count shortfall plus fixed points.
    pub warnings: usize,
}

/// Pair every sample with another one so that exactly `round(r * B)` pairs share
/// a class and the rest do not.
///
/// When no derangement achieves the count, self-pairs are allowed; when even
/// that fails the nearest achievable count is used. Each relaxation is counted
/// in [`Pairing::warnings`].
pub fn semantic_pairing<R: Rng + ?Sized>(labels: &[usize], r: f64, rng: &mut R) -> Result<Pairing> {
    let b = labels.len();
    if b < 2 {
        return Err(ImaeError::Data(format!("pairing needs at least 2 samples, got {b}")));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(ImaeError::Config(format!("same-class ratio {r} outside [0, 1]")));
    }
    let want = (r * b as f64).round() as usize;

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    groups.shuffle(rng);
    for g in &mut groups {
        g.shuffle(rng);
    }
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();

    if let Some(cross) = allocate_cross(&sizes, b - want, true) {
        return Ok(Pairing {
            perm: build_pairing(&groups, &cross, rng),
            warnings: 0,
        });
    }
    if let Some(cross) = allocate_cross(&sizes, b - want, false) {
        let perm = build_pairing(&groups, &cross, rng);
        let fixed = perm.iter().enumerate().filter(|(i, p)| i == *p).count();
        return Ok(Pairing { perm, warnings: fixed });
    }
    // Nearest achievable count, preferring derangements at equal distance.
    for dist in 1..=b {
        for k in [want.checked_sub(dist), Some(want + dist)].into_iter().flatten() {
            if k > b {
                continue;
            }
            for derange in [true, false] {
                if let Some(cross) = allocate_cross(&sizes, b - k, derange) {
                    let perm = build_pairing(&groups, &cross, rng);
                    let fixed = perm.iter().enumerate().filter(|(i, p)| i == *p).count();
                    return Ok(Pairing {
                        perm,
                        warnings: dist + fixed,
                    });
                }
            }
        }
    }
    unreachable!("k = b always admits an allocation when self-pairs are allowed")
}

/// Number of members of each class paired across classes, so that the cross
/// pairs total `m` and no class holds more than half of them. With `derange`,
/// singleton classes must pair across. Returns the min-max allocation or `None`.
fn allocate_cross(sizes: &[usize], m: usize, derange: bool) -> Option<Vec<usize>> {
    let lower: Vec<usize> = sizes
        .iter()
        .map(|&n| usize::from(derange && n == 1))
        .collect();
    if lower.iter().sum::<usize>() > m || sizes.iter().sum::<usize>() < m {
        return None;
    }
    let fill = |level: usize| -> Vec<usize> {
        sizes
            .iter()
            .zip(&lower)
            .map(|(&n, &l)| l.max(n.min(level)))
            .collect()
    };
    let mut level = 0;
    while fill(level).iter().sum::<usize>() < m {
        level += 1;
    }
    let mut cross = fill(level.saturating_sub(1));
    let mut deficit = m - cross.iter().sum::<usize>();
    for (c, &n) in cross.iter_mut().zip(sizes) {
        if deficit == 0 {
            break;
        }
        if *c < n.min(level) {
            *c += 1;
            deficit -= 1;
        }
    }
    let max = cross.iter().copied().max().unwrap_or(0);
    (2 * max <= m).then_some(cross)
}

fn build_pairing<R: Rng + ?Sized>(groups: &[Vec<usize>], cross: &[usize], rng: &mut R) -> Vec<usize> {
    let n: usize = groups.iter().map(Vec::len).sum();
    let mut perm = vec![usize::MAX; n];
    let mut sources = Vec::new();
    let mut slots = Vec::new();
    for (members, &d) in groups.iter().zip(cross) {
        let same = &members[..members.len() - d];
        let diff = &members[members.len() - d..];
        sources.extend_from_slice(diff);
        match same.len() {
            0 => slots.extend_from_slice(diff),
            1 if diff.is_empty() => {
                perm[same[0]] = same[0];
            }
            1 => {
                // The lone same-class source takes a cross member as partner and
                // hands its own slot to the cross pool.
                let j = rng.random_range(0..diff.len());
                perm[same[0]] = diff[j];
                slots.push(same[0]);
                slots.extend(diff.iter().enumerate().filter(|&(k, _)| k != j).map(|(_, &x)| x));
            }
            k => {
                for (idx, &i) in same.iter().enumerate() {
                    perm[i] = same[(idx + 1) % k];
                }
                slots.extend_from_slice(diff);
            }
        }
    }
    // Sources and slots are grouped by class with equal group sizes, so a cyclic
    // shift by the largest group never lands inside the same class.
    let m = sources.len();
    if m > 0 {
        let shift = cross.iter().copied().max().unwrap_or(0);
        for (pos, &src) in sources.iter().enumerate() {
            perm[src] = slots[(pos + shift) % m];
        }
    }
    debug_assert!(perm.iter().all(|&p| p < n));
    perm
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub mixed: ImageBatch,
    pub sub: ImageBatch,
    pub dom: ImageBatch,
    /// `min(alpha, 1 - alpha)` per pair.
    pub sub_coeff: Vec<f64>,
}

/// `mixed[i] = alpha[i] * batch[i] + (1 - alpha[i]) * batch[perm[i]]`, evaluated
/// as an offset from the image with the larger coefficient so that `alpha` of 0
/// or 1, and mixing an image with itself, reproduce the input exactly.
pub fn mix_batch(batch: &ImageBatch, spec: &MixSpec) -> Result<MixedBatch> {
    let b = batch.len();
    if spec.len() != b {
        return Err(shape_err(format!("mix spec for {} pairs, batch of {b}", spec.len())));
    }
    let (h, w, c) = batch.image_shape();
    let mut mixed = Array4::zeros((b, h, w, c));
    for i in 0..b {
        let a = spec.alpha[i];
        let x = batch.pixels.slice(s![i, .., .., ..]);
        let y = batch.pixels.slice(s![spec.perm[i], .., .., ..]);
        ndarray::Zip::from(mixed.slice_mut(s![i, .., .., ..]))
            .and(&x)
            .and(&y)
            .for_each(|m, &xv, &yv| *m = if a >= 0.5 { xv + (1.0 - a) * (yv - xv) } else { yv + a * (xv - yv) });
    }
    let (sub_idx, dom_idx) = spec.sub_dom_indices();
    Ok(MixedBatch {
        mixed: ImageBatch {
            pixels: mixed,
            labels: None,
            ids: batch.ids.clone(),
        },
        sub: batch.select(&sub_idx),
        dom: batch.select(&dom_idx),
        sub_coeff: spec.sub_coeff(),
    })
}
