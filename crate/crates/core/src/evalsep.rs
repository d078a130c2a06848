//! Linear-separability evaluation: an ℓ1-regularized linear regressor from the
//! disentangled student features to frozen-teacher features of the same image,
//! with NRMSE / R² / cosine similarity before ("Fore") and after ("Aft") the fit.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{encode, BackboneConfig, MaskSpec};
use crate::data::{derive_seed, Dataset};
use crate::error::{shape_err, ImaeError, Result};
use crate::imae::subordinate_features;
use crate::mixer::{mix_batch, MixConfig, MixSpec};
use crate::params::ParamStore;
use crate::Mat;

/// `Y ≈ X W + b`, fitted with an ℓ1 penalty on `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    /// `[D_in, D_out]`.
    pub w: Mat,
    pub bias: Array1<f64>,
    pub lambda: f64,
    /// Coordinate-descent sweeps performed.
    pub sweeps: usize,
    /// Objective value after each sweep (index 0 is the starting point `W = 0`).
    pub objective: Vec<f64>,
    pub converged: bool,
}

impl LinearMap {
    pub fn predict(&self, x: &Mat) -> Mat {
        x.dot(&self.w) + &self.bias
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoOptions {
    /// Stop when no coefficient moved by more than this during a sweep. The
    /// default is tight enough that unpenalized fits agree with the exact
    /// least-squares solution to about 1e-6 on well-conditioned problems.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_sweeps: 1000,
        }
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Minimize `(1/2M)‖Y − XW − 1bᵀ‖²_F + λ‖W‖₁` by cyclic coordinate descent.
///
/// The unpenalized intercept is profiled out by centering, so the descent runs on
/// the Gram matrix of the centered features; each output column is an independent
/// lasso problem sharing that Gram matrix.
pub fn fit_lasso(x: &Mat, y: &Mat, lambda: f64, opts: LassoOptions) -> Result<LinearMap> {
    let m = x.nrows();
    if m < 2 || y.nrows() != m {
        return Err(shape_err(format!("lasso needs >= 2 paired rows, got {} and {}", m, y.nrows())));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(ImaeError::Config(format!("lasso penalty must be >= 0, got {lambda}")));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(ImaeError::Numeric("non-finite regression inputs".into()));
    }
    let (d, k) = (x.ncols(), y.ncols());
    let x_mean = x.mean_axis(Axis(0)).expect("m >= 2");
    let y_mean = y.mean_axis(Axis(0)).expect("m >= 2");
    let xc = x - &x_mean;
    let yc = y - &y_mean;
    let inv_m = 1.0 / m as f64;
    let gram = xc.t().dot(&xc) * inv_m;
    let cross = xc.t().dot(&yc) * inv_m;
    let yy: Vec<f64> = yc.columns().into_iter().map(|c| c.dot(&c) * inv_m).collect();

    // Objective of one column in Gram form: ½(yᵀy − 2cᵀw + wᵀGw)/M + λ|w|₁.
    let objective = |w: &Mat| -> f64 {
        let gw = gram.dot(w);
        (0..k)
            .map(|j| {
                let wj = w.column(j);
                0.5 * (yy[j] - 2.0 * cross.column(j).dot(&wj) + wj.dot(&gw.column(j)))
                    + lambda * wj.iter().map(|v| v.abs()).sum::<f64>()
            })
            .sum()
    };

    let mut w = Array2::<f64>::zeros((d, k));
    // Running G·w per output column, kept in sync with every coordinate update.
    let mut gw = Array2::<f64>::zeros((d, k));
    let mut history = vec![objective(&w)];
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut max_delta = 0.0f64;
        for j in 0..k {
            for a in 0..d {
                let g_aa = gram[[a, a]];
                let old = w[[a, j]];
                let new = if g_aa > 0.0 {
                    let rho = cross[[a, j]] - (gw[[a, j]] - g_aa * old);
                    soft_threshold(rho, lambda) / g_aa
                } else {
                    0.0
                };
                let delta = new - old;
                if delta != 0.0 {
                    w[[a, j]] = new;
                    gw.column_mut(j).scaled_add(delta, &gram.column(a));
                    max_delta = max_delta.max(delta.abs());
                }
            }
        }
        history.push(objective(&w));
        if max_delta < opts.tol {
            converged = true;
            break;
        }
    }
    let bias = &y_mean - &x_mean.dot(&w);
    Ok(LinearMap {
        w,
        bias,
        lambda,
        sweeps,
        objective: history,
        converged,
    })
}

fn check_pair(pred: &Mat, target: &Mat) -> Result<()> {
    if pred.dim() != target.dim() || target.is_empty() {
        return Err(shape_err(format!("metric inputs {:?} vs {:?}", pred.dim(), target.dim())));
    }
    Ok(())
}

/// Root-mean-square error divided by the population standard deviation of all
/// target entries.
pub fn nrmse(pred: &Mat, target: &Mat) -> Result<f64> {
    check_pair(pred, target)?;
    let std = target.std(0.0);
    if std == 0.0 {
        return Err(ImaeError::Numeric("NRMSE of a constant target".into()));
    }
    let mse = (pred - target).mapv(|v| v * v).mean().expect("non-empty");
    Ok(mse.sqrt() / std)
}

/// `1 − SS_res / SS_tot`, with `SS_tot` about the global target mean.
pub fn r_squared(pred: &Mat, target: &Mat) -> Result<f64> {
    check_pair(pred, target)?;
    let mean = target.mean().expect("non-empty");
    let ss_tot: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(ImaeError::Numeric("R² of a constant target".into()));
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cosine {
    pub mean: f64,
    /// Rows skipped because either side had zero norm.
    pub skipped: usize,
}

/// Mean row-wise cosine similarity.
pub fn cosine_sim(pred: &Mat, target: &Mat) -> Result<Cosine> {
    check_pair(pred, target)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    for (p, t) in pred.rows().into_iter().zip(target.rows()) {
        let (np, nt) = (p.dot(&p).sqrt(), t.dot(&t).sqrt());
        if np == 0.0 || nt == 0.0 {
            continue;
        }
        sum += (p.dot(&t) / (np * nt)).clamp(-1.0, 1.0);
        used += 1;
    }
    if used == 0 {
        return Err(ImaeError::Numeric("cosine similarity: every row has zero norm".into()));
    }
    Ok(Cosine {
        mean: sum / used as f64,
        skipped: pred.nrows() - used,
    })
}

/// Token-aligned student/teacher features; one row per visible patch token.
#[derive(Debug, Clone, PartialEq)]
pub struct SepFeatures {
    pub student: Mat,
    pub teacher: Mat,
    /// Sample id owning each row (used for the deterministic split).
    pub row_ids: Vec<u64>,
}

/// Student subordinate-branch features on mixed inputs, and teacher features of
/// the unmixed subordinate image under the same mask. With `mix = None` the
/// student sees the plain image (the no-mixing reference path).
pub fn collect_features(
    model: &BackboneConfig,
    student: &ParamStore,
    teacher: &ParamStore,
    data: &Dataset,
    mix: Option<&MixConfig>,
    images: usize,
    seed: u64,
) -> Result<SepFeatures> {
    let data = data.head(images);
    if data.len() < 2 {
        return Err(ImaeError::Data(format!("separability needs >= 2 images, got {}", data.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5e9a]));
    let (mut s_parts, mut t_parts, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    for batch in data.batches(64, seed, 0, false, false) {
        if batch.len() < 2 {
            continue;
        }
        let mask = MaskSpec::sample(batch.len(), model.num_patches(), model.mask_ratio, &mut rng)?;
        let (input, sub) = match mix {
            Some(cfg) => {
                let spec = MixSpec::sample(&batch, cfg, &mut rng)?;
                let mixed = mix_batch(&batch, &spec)?;
                (mixed.mixed, mixed.sub)
            }
            None => (batch.clone(), batch),
        };
        let s = subordinate_features(model, student, &input, &mask)?;
        let t = encode(model, teacher, &sub, &mask)?.patch_tokens();
        let v = mask.num_visible();
        ids.extend(sub.ids.iter().flat_map(|&id| std::iter::repeat_n(id, v)));
        s_parts.push(s);
        t_parts.push(t);
    }
    let cat = |parts: &[Mat]| {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("same width")
    };
    let student = cat(&s_parts);
    let teacher = cat(&t_parts);
    if student.dim() != teacher.dim() {
        return Err(shape_err("student and teacher feature widths differ"));
    }
    Ok(SepFeatures {
        student,
        teacher,
        row_ids: ids,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    pub lambda: f64,
    pub n_fit: usize,
    pub n_eval: usize,
    pub nrmse_fore: f64,
    pub nrmse_aft: f64,
    pub r2_fore: f64,
    pub r2_aft: f64,
    pub cos_fore: f64,
    pub cos_aft: f64,
    pub skipped_rows: usize,
    pub lasso_sweeps: usize,
    #[serde(skip)]
    pub map: Option<LinearMap>,
}

/// Whether a sample id falls into the fitting portion.
pub fn in_fit_split(id: u64, fit_fraction: f64, seed: u64) -> bool {
    let u = (derive_seed(seed, &[0x59117, id]) >> 11) as f64 / (1u64 << 53) as f64;
    u < fit_fraction
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitOptions {
    pub fit_fraction: f64,
    pub seed: u64,
    /// Evaluate on the fitting rows instead of the held-out ones.
    pub eval_on_fit: bool,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            fit_fraction: 0.8,
            seed: 0,
            eval_on_fit: false,
        }
    }
}

/// Fore metrics compare raw student and teacher features, Aft metrics compare the
/// regressor's predictions with the teacher features; both on the evaluation rows.
pub fn report_from_features(
    f: &SepFeatures,
    lambda: f64,
    split: SplitOptions,
    lasso: LassoOptions,
) -> Result<SeparabilityReport> {
    let (mut fit, mut eval) = (Vec::new(), Vec::new());
    for (r, &id) in f.row_ids.iter().enumerate() {
        if in_fit_split(id, split.fit_fraction, split.seed) {
            fit.push(r);
        } else {
            eval.push(r);
        }
    }
    if split.eval_on_fit {
        eval = fit.clone();
    }
    if fit.len() < 2 || eval.is_empty() {
        return Err(ImaeError::Data(format!(
            "insufficient samples for the fit/eval split ({} / {} rows)",
            fit.len(),
            eval.len()
        )));
    }
    let map = fit_lasso(
        &f.student.select(Axis(0), &fit),
        &f.teacher.select(Axis(0), &fit),
        lambda,
        lasso,
    )?;
    let xs = f.student.select(Axis(0), &eval);
    let ys = f.teacher.select(Axis(0), &eval);
    let pred = map.predict(&xs);
    let cos_fore = cosine_sim(&xs, &ys)?;
    let cos_aft = cosine_sim(&pred, &ys)?;
    Ok(SeparabilityReport {
        lambda,
        n_fit: fit.len(),
        n_eval: eval.len(),
        nrmse_fore: nrmse(&xs, &ys)?,
        nrmse_aft: nrmse(&pred, &ys)?,
        r2_fore: r_squared(&xs, &ys)?,
        r2_aft: r_squared(&pred, &ys)?,
        cos_fore: cos_fore.mean,
        cos_aft: cos_aft.mean,
        skipped_rows: cos_fore.skipped.max(cos_aft.skipped),
        lasso_sweeps: map.sweeps,
        map: Some(map),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn separability_report(
    model: &BackboneConfig,
    student: &ParamStore,
    teacher: &ParamStore,
    data: &Dataset,
    mix: Option<&MixConfig>,
    images: usize,
    lambda: f64,
    split: SplitOptions,
) -> Result<SeparabilityReport> {
    let f = collect_features(model, student, teacher, data, mix, images, split.seed)?;
    report_from_features(&f, lambda, split, LassoOptions::default())
}

pub const REPORT_HEADER: &str =
    "lambda,n_fit,n_eval,nrmse_fore,nrmse_aft,r2_fore,r2_aft,cos_fore,cos_aft,skipped_rows,lasso_sweeps";

pub fn reports_csv(reports: &[SeparabilityReport]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.lambda,
            r.n_fit,
            r.n_eval,
            r.nrmse_fore,
            r.nrmse_aft,
            r.r2_fore,
            r.r2_aft,
            r.cos_fore,
            r.cos_aft,
            r.skipped_rows,
            r.lasso_sweeps
        );
    }
    s
}

/// Fixed-width table with Fore/Aft columns per metric.
pub fn reports_table(reports: &[SeparabilityReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>8} | {:>8} {:>8} | {:>8} {:>8} | {:>8} {:>8}",
        "", "NRMSE", "", "R2", "", "cosine", ""
    );
    let _ = writeln!(
        s,
        "{:>8} | {:>8} {:>8} | {:>8} {:>8} | {:>8} {:>8}",
        "lambda", "Fore", "Aft", "Fore", "Aft", "Fore", "Aft"
    );
    let _ = writeln!(s, "{}", "-".repeat(67));
    for r in reports {
        let _ = writeln!(
            s,
            "{:>8} | {:>8.4} {:>8.4} | {:>8.4} {:>8.4} | {:>8.4} {:>8.4}",
            format!("{:e}", r.lambda),
            r.nrmse_fore,
            r.nrmse_aft,
            r.r2_fore,
            r.r2_aft,
            r.cos_fore,
            r.cos_aft
        );
    }
    s
}
