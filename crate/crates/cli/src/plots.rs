//! Weight-distribution histograms and attention heat maps for comparing two
//! checkpoints of the same architecture.

use std::fmt::Write;

use image::{Rgb, RgbImage};
use imae_core::{ImaeError, Mat, ParamStore, Result};

/// Every value of the encoder's `*.weight` tensors, in parameter-name order.
pub fn encoder_weights(params: &ParamStore) -> Vec<f64> {
    params
        .iter()
        .filter(|(name, _)| name.starts_with("encoder.") && name.ends_with(".weight"))
        .flat_map(|(_, m)| m.iter().copied())
        .collect()
}

/// Two histograms sharing fixed bins over the symmetric range `[-limit, limit]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub limit: f64,
    pub counts_a: Vec<u64>,
    pub counts_b: Vec<u64>,
}

fn bin_of(v: f64, limit: f64, bins: usize) -> usize {
    let t = (v + limit) / (2.0 * limit);
    ((t * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

impl Histogram {
    pub fn new(a: &[f64], b: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(ImaeError::Config("histogram needs at least one bin".into()));
        }
        if a.iter().chain(b).any(|v| !v.is_finite()) {
            return Err(ImaeError::Numeric("non-finite weight in histogram input".into()));
        }
        let max = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
        let limit = if max > 0.0 { max } else { 1.0 };
        let count = |vals: &[f64]| {
            let mut c = vec![0u64; bins];
            for &v in vals {
                c[bin_of(v, limit, bins)] += 1;
            }
            c
        };
        Ok(Self {
            limit,
            counts_a: count(a),
            counts_b: count(b),
        })
    }

    pub fn bins(&self) -> usize {
        self.counts_a.len()
    }

    pub fn edges(&self, i: usize) -> (f64, f64) {
        let w = 2.0 * self.limit / self.bins() as f64;
        (-self.limit + i as f64 * w, -self.limit + (i + 1) as f64 * w)
    }

    /// Index of the bin containing zero.
    pub fn zero_bin(&self) -> usize {
        bin_of(0.0, self.limit, self.bins())
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("bin,lo,hi,count_a,count_b\n");
        for i in 0..self.bins() {
            let (lo, hi) = self.edges(i);
            let _ = writeln!(s, "{i},{lo},{hi},{},{}", self.counts_a[i], self.counts_b[i]);
        }
        s
    }

    /// Overlaid bar chart: first checkpoint red, second blue, overlap purple.
    pub fn render(&self, height: u32) -> RgbImage {
        let bins = self.bins() as u32;
        let peak = self.counts_a.iter().chain(&self.counts_b).copied().max().unwrap_or(0).max(1);
        let mut img = RgbImage::from_pixel(bins * 2, height, Rgb([255, 255, 255]));
        for i in 0..bins {
            let bar = |c: u64| (c as f64 / peak as f64 * height as f64).round() as u32;
            let (ha, hb) = (bar(self.counts_a[i as usize]), bar(self.counts_b[i as usize]));
            for y in 0..height {
                let level = height - y;
                let color = match (level <= ha, level <= hb) {
                    (true, true) => Rgb([128, 0, 160]),
                    (true, false) => Rgb([220, 40, 40]),
                    (false, true) => Rgb([40, 80, 220]),
                    (false, false) => continue,
                };
                img.put_pixel(2 * i, y, color);
                img.put_pixel(2 * i + 1, y, color);
            }
        }
        img
    }
}

/// Black-red-yellow-white ramp for `t` in `[0, 1]`.
fn heat(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0) * 3.0;
    let c = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([c(t), c(t - 1.0), c(t - 2.0)])
}

/// Heat map of a matrix, scaled so that its maximum is white; every entry is
/// drawn as a `scale`-pixel square.
pub fn heatmap(m: &Mat, scale: u32) -> RgbImage {
    let scale = scale.max(1);
    let max = m.iter().fold(0.0f64, |a, &v| a.max(v));
    let (rows, cols) = m.dim();
    let mut img = RgbImage::new(cols as u32 * scale, rows as u32 * scale);
    for ((r, c), &v) in m.indexed_iter() {
        let color = heat(if max > 0.0 { v / max } else { 0.0 });
        for dy in 0..scale {
            for dx in 0..scale {
                img.put_pixel(c as u32 * scale + dx, r as u32 * scale + dy, color);
            }
        }
    }
    img
}

pub fn matrix_csv(m: &Mat) -> String {
    let mut s = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

/// Same tensor names and shapes.
pub fn same_architecture(a: &ParamStore, b: &ParamStore) -> bool {
    a.len() == b.len() && a.iter().all(|(n, m)| b.get(n).is_some_and(|o| o.dim() == m.dim()))
}
