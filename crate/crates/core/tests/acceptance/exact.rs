//! Exact property suites: gradients, masking, mixing, lasso and metrics.

use imae_core::backbone::{init_backbone, random_mask};
use imae_core::data::{load_dataset, DataConfig, ImageBatch, Split};
use imae_core::evalsep::{cosine_sim, fit_lasso, nrmse, r_squared, LassoOptions};
use imae_core::imae::{imae_forward_with_mask, init_heads};
use imae_core::mixer::{mix_batch, semantic_pairing, MixSpec};
use imae_core::{BackboneConfig, LossConfig, MaskSpec, ParamStore, Profile};
use nalgebra::DMatrix;
use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Verdict;

const GRAD_REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-4;
const MASK_DRAWS: usize = 1000;
const PAIRING_VECTORS: usize = 500;
const LASSO_SYSTEMS: usize = 100;
const LASSO_TOL: f64 = 1e-6;
/// Objective values are recomputed in floating point after every sweep; rises
/// smaller than this relative amount are evaluation rounding, not ascent.
const OBJECTIVE_RESOLUTION: f64 = 1e-12;
const IDENTITY_TOL: f64 = 1e-10;
/// `1 - (1 - alpha)` need not round back to `alpha`, so the swapped form may
/// differ in the last bit.
const MIX_TOL: f64 = 1e-15;

fn norm(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Dual branch with distillation and `c = 1`, on the smallest profile. Every
/// parameter is nudged away from its initial value so zero-initialized biases
/// and unit norm gains are exercised too.
pub fn gradient_oracle() -> Verdict {
    let model = BackboneConfig::from_profile(Profile::Nano, 16, 0.75);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut student = init_backbone(&model, &mut rng);
    student.merge(&init_heads(model.embed_dim, &mut rng));
    for (_, m) in student.iter_mut() {
        m.mapv_inplace(|v| v + rng.random_range(-0.1..0.1));
    }
    let teacher = init_backbone(&model, &mut rng);
    let data = load_dataset(&DataConfig { image_size: 16, num_train: 4, ..DataConfig::default() }, Split::Train)
        .expect("synthetic data");
    let batch = data.batch(&[0, 1, 2, 3]);
    let spec = MixSpec::new(vec![1, 2, 3, 0], vec![0.3, 0.7, 0.45, 0.6], None).expect("mix spec");
    let mask = MaskSpec::sample(4, model.num_patches(), 0.75, &mut rng).expect("mask");
    let cfg = LossConfig { c: 1.0, dual_branch: true, use_distill: true, ..LossConfig::default() };
    let loss = |p: &ParamStore| {
        imae_forward_with_mask(&model, &batch, &spec, &mask, p, Some(&teacher), &cfg, false)
            .expect("forward")
            .report
            .total
    };
    let grads = imae_forward_with_mask(&model, &batch, &spec, &mask, &student, Some(&teacher), &cfg, true)
        .expect("forward")
        .grads
        .expect("gradients");

    let mut worst = (String::new(), 0.0f64);
    let mut tensors = 0;
    let mut probe = student.clone();
    for (name, analytic) in grads.iter() {
        let mut numeric = Array2::zeros(analytic.dim());
        for ((r, c), slot) in numeric.indexed_iter_mut() {
            let orig = probe.get(name).expect("param")[[r, c]];
            probe.get_mut(name).expect("param")[[r, c]] = orig + FD_STEP;
            let up = loss(&probe);
            probe.get_mut(name).expect("param")[[r, c]] = orig - FD_STEP;
            let down = loss(&probe);
            probe.get_mut(name).expect("param")[[r, c]] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        let scale = norm(analytic).max(norm(&numeric));
        let rel = if scale == 0.0 { 0.0 } else { norm(&(&numeric - analytic)) / scale };
        if rel > worst.1 {
            worst = (name.clone(), rel);
        }
        tensors += 1;
    }
    let covered = tensors == student.len();
    Verdict::new(
        covered && worst.1 < GRAD_REL_TOL,
        format!(
            "{tensors}/{} tensors, worst relative error {:.2e} ({}), tolerance {GRAD_REL_TOL:.0e}",
            student.len(),
            worst.1,
            worst.0
        ),
    )
}

/// Round trip through the restore indices, exact visible counts, and the
/// reference 196-patch / 75% configuration.
pub fn mask_suite() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut failures = Vec::new();
    let mut valid = 0;
    let mut rejected = 0;
    for draw in 0..MASK_DRAWS {
        let n = rng.random_range(1..=400usize);
        let ratio: f64 = rng.random_range(0.0..1.0);
        let b = rng.random_range(1..=3usize);
        let d = 2;
        let tokens = Array3::from_shape_fn((b, n, d), |(bi, i, k)| (bi * 100_000 + i * 10 + k) as f64);
        // Integer oracle for the masked count: round half away from zero of m*N.
        let product = ratio * n as f64;
        let masked = product.floor() as usize + usize::from(product - product.floor() >= 0.5);
        let feasible = masked > 0 && masked < n;
        match random_mask(&tokens, ratio, &mut rng) {
            Err(_) if !feasible => rejected += 1,
            Err(e) => failures.push(format!("draw {draw}: N={n} m={ratio}: unexpected error {e}")),
            Ok(_) if !feasible => failures.push(format!("draw {draw}: N={n} m={ratio}: accepted degenerate mask")),
            Ok((visible, spec)) => {
                valid += 1;
                if visible.dim().1 != n - masked || spec.num_visible() != n - masked {
                    failures.push(format!("draw {draw}: N={n} m={ratio}: {} visible, want {}", visible.dim().1, n - masked));
                    continue;
                }
                if let Some(msg) = restore_mismatch(&tokens, &visible, &spec) {
                    failures.push(format!("draw {draw}: {msg}"));
                }
            }
        }
    }
    let reference = MaskSpec::sample(1, 196, 0.75, &mut rng).map(|m| m.num_visible()).ok();
    let profile = BackboneConfig::from_profile(Profile::Tiny, 56, 0.75);
    let profile_ok = profile.num_patches() == 196 && profile.num_visible() == 49;
    if reference != Some(49) || !profile_ok {
        failures.push(format!("N=196 m=0.75 gives {reference:?} visible, want 49"));
    }
    Verdict::new(
        failures.is_empty(),
        match failures.first() {
            None => format!("{valid} valid draws round-trip, {rejected} degenerate draws rejected, N=196 m=0.75 -> 49"),
            Some(f) => format!("{} failures; first: {f}", failures.len()),
        },
    )
}

/// Append a sentinel for every masked position, unshuffle with the restore
/// indices, and check each token lands back where it came from.
fn restore_mismatch(tokens: &Array3<f64>, visible: &Array3<f64>, spec: &MaskSpec) -> Option<String> {
    let (b, n, d) = tokens.dim();
    let v = visible.dim().1;
    let sentinel = -1.0;
    for bi in 0..b {
        let mut shuffled = Array2::from_elem((n, d), sentinel);
        shuffled.slice_mut(s![..v, ..]).assign(&visible.slice(s![bi, .., ..]));
        for i in 0..n {
            let row = shuffled.row(spec.ids_restore[[bi, i]]);
            let expected_visible = spec.mask[[bi, i]] == 0;
            let is_original = row == tokens.slice(s![bi, i, ..]);
            let is_sentinel = row.iter().all(|&x| x == sentinel);
            if (expected_visible && !is_original) || (!expected_visible && !is_sentinel) {
                return Some(format!("sample {bi} patch {i} not restored"));
            }
        }
    }
    None
}

fn random_images(rng: &mut ChaCha8Rng, b: usize, size: usize) -> ImageBatch {
    let px = Array4::from_shape_fn((b, size, size, 3), |_| rng.random::<f64>());
    ImageBatch::new(px, None, (0..b as u64).collect()).expect("images")
}

/// Mixing symmetry and identity, then exact semantic pairing counts checked
/// against exhaustive enumeration of derangements.
pub fn mixer_suite() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst_sym = 0.0f64;
    let mut worst_id = 0.0f64;
    for _ in 0..200 {
        let alpha: f64 = rng.random_range(0.0..=1.0);
        let pair = random_images(&mut rng, 2, 8);
        // Row 0 is mix(alpha, x, y); row 1 is mix(1 - alpha, y, x).
        let spec = MixSpec::new(vec![1, 0], vec![alpha, 1.0 - alpha], None).expect("spec");
        let m = mix_batch(&pair, &spec).expect("mix");
        let diff = &m.mixed.pixels.index_axis(Axis(0), 0) - &m.mixed.pixels.index_axis(Axis(0), 1);
        worst_sym = diff.iter().fold(worst_sym, |a, d| a.max(d.abs()));
        let twin = pair.select(&[0, 0]);
        let m = mix_batch(&twin, &spec).expect("mix");
        let diff = &m.mixed.pixels - &twin.pixels;
        worst_id = diff.iter().fold(worst_id, |a, d| a.max(d.abs()));
    }

    let mut checked = 0;
    let mut pairing_failures = Vec::new();
    while checked < PAIRING_VECTORS {
        let b = rng.random_range(2..=8usize);
        let classes = rng.random_range(1..=4usize);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..classes)).collect();
        let r: f64 = rng.random_range(0.0..=1.0);
        let target = (r * b as f64).round() as usize;
        if !achievable_counts(&labels).contains(&target) {
            continue;
        }
        checked += 1;
        match semantic_pairing(&labels, r, &mut rng) {
            Ok(p) => {
                let same = exhaustive_same_class(&labels, &p.perm);
                let deranged = p.perm.iter().enumerate().all(|(i, &j)| i != j) && is_permutation(&p.perm);
                if same != Some(target) || !deranged || p.warnings != 0 {
                    pairing_failures.push(format!("labels {labels:?} r={r:.3}: {same:?} same-class, want {target}"));
                }
            }
            Err(e) => pairing_failures.push(format!("labels {labels:?} r={r:.3}: {e}")),
        }
    }
    let pass = worst_sym <= MIX_TOL && worst_id == 0.0 && pairing_failures.is_empty();
    Verdict::new(
        pass,
        format!(
            "symmetry max |diff| {worst_sym:.1e} (tol {MIX_TOL:.0e}), identity max |diff| {worst_id:.1e}, \
             {checked} feasible label vectors, {} pairing failures{}",
            pairing_failures.len(),
            pairing_failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    )
}

fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    perm.iter().all(|&p| p < perm.len() && !std::mem::replace(&mut seen[p], true))
}

/// Counts same-class pairs by checking every (i, j) combination against the
/// permutation, independent of how the permutation was built.
fn exhaustive_same_class(labels: &[usize], perm: &[usize]) -> Option<usize> {
    if perm.len() != labels.len() {
        return None;
    }
    let mut count = 0;
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if perm[i] == j && labels[i] == labels[j] {
                count += 1;
            }
        }
    }
    Some(count)
}

/// Every same-class count reachable by some derangement, by enumeration.
fn achievable_counts(labels: &[usize]) -> Vec<usize> {
    fn walk(i: usize, labels: &[usize], used: &mut [bool], count: usize, out: &mut Vec<usize>) {
        if i == labels.len() {
            if !out.contains(&count) {
                out.push(count);
            }
            return;
        }
        for j in 0..labels.len() {
            if j != i && !used[j] {
                used[j] = true;
                walk(i + 1, labels, used, count + usize::from(labels[i] == labels[j]), out);
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    walk(0, labels, &mut vec![false; labels.len()], 0, &mut out);
    out
}

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

/// Least squares with intercept through an SVD of the augmented design matrix.
fn least_squares(x: &Array2<f64>, y: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let (m, d) = x.dim();
    let k = y.ncols();
    let a = DMatrix::from_fn(m, d + 1, |i, j| if j < d { x[[i, j]] } else { 1.0 });
    let b = DMatrix::from_fn(m, k, |i, j| y[[i, j]]);
    let sol = a.svd(true, true).solve(&b, 1e-14).expect("svd solve");
    let w = Array2::from_shape_fn((d, k), |(i, j)| sol[(i, j)]);
    let bias = (0..k).map(|j| sol[(d, j)]).collect();
    (w, bias)
}

pub fn lasso_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    let mut increases = 0;
    let mut worst_rise = 0.0f64;
    let mut shrink_failures = 0;
    for _ in 0..LASSO_SYSTEMS {
        let x = random_mat(&mut rng, 32, 8);
        let y = random_mat(&mut rng, 32, 8);
        let fit = fit_lasso(&x, &y, 0.0, LassoOptions::default()).expect("lasso");
        let (w, bias) = least_squares(&x, &y);
        worst = (&fit.w - &w).iter().fold(worst, |a, d| a.max(d.abs()));
        worst = fit.bias.iter().zip(&bias).fold(worst, |a, (p, q)| a.max((p - q).abs()));

        for lambda in [0.0, 0.01, 0.1] {
            let fit = fit_lasso(&x, &y, lambda, LassoOptions::default()).expect("lasso");
            for o in fit.objective.windows(2) {
                let rise = (o[1] - o[0]) / o[0].abs().max(f64::MIN_POSITIVE);
                worst_rise = worst_rise.max(rise);
                increases += usize::from(rise > OBJECTIVE_RESOLUTION);
            }
        }

        let fit = fit_lasso(&x, &y, 1e6, LassoOptions::default()).expect("lasso");
        let means = y.mean_axis(Axis(0)).expect("rows");
        let bias_err = fit.bias.iter().zip(&means).fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
        if fit.w.iter().any(|&v| v != 0.0) || bias_err > 1e-12 {
            shrink_failures += 1;
        }
    }
    Verdict::new(
        worst < LASSO_TOL && increases == 0 && shrink_failures == 0,
        format!(
            "{LASSO_SYSTEMS} systems: max |lambda=0 - least squares| {worst:.2e} (tol {LASSO_TOL:.0e}), \
             {increases} objective increases beyond rounding (largest relative rise {worst_rise:.1e}, \
             resolution {OBJECTIVE_RESOLUTION:.0e}), {shrink_failures} large-lambda fits with W != 0"
        ),
    )
}

pub fn metric_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut worst_identity = 0.0f64;
    let mut cos_out_of_range = 0;
    let mut self_failures = 0;
    for trial in 0..500 {
        let (m, d) = (rng.random_range(2..40usize), rng.random_range(1..20usize));
        let target = random_mat(&mut rng, m, d);
        let noise: f64 = rng.random_range(0.0..3.0);
        let pred = match trial % 3 {
            0 => &target + &(random_mat(&mut rng, m, d) * noise),
            1 => -&target * noise,
            _ => random_mat(&mut rng, m, d),
        };
        let (e, r2) = (nrmse(&pred, &target).expect("nrmse"), r_squared(&pred, &target).expect("r2"));
        worst_identity = worst_identity.max((r2 - (1.0 - e * e)).abs());
        let cos = cosine_sim(&pred, &target).expect("cosine").mean;
        if !(-1.0..=1.0).contains(&cos) {
            cos_out_of_range += 1;
        }
        let e = nrmse(&target, &target).expect("nrmse");
        let r2 = r_squared(&target, &target).expect("r2");
        let cos = cosine_sim(&target, &target).expect("cosine").mean;
        if e != 0.0 || r2 != 1.0 || (cos - 1.0).abs() > 1e-12 {
            self_failures += 1;
        }
    }
    Verdict::new(
        worst_identity < IDENTITY_TOL && cos_out_of_range == 0 && self_failures == 0,
        format!(
            "max |r2 - (1 - nrmse^2)| {worst_identity:.2e} (tol {IDENTITY_TOL:.0e}), \
             {cos_out_of_range} cosines outside [-1, 1], {self_failures} self-comparisons off (0, 1, 1)"
        ),
    )
}
