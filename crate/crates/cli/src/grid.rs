//! Reconstruction grids: one row per mix factor, four columns (mixed input,
//! masked input, subordinate reconstruction, subordinate target), each row
//! labelled with its mix factor in a small bitmap font.

use image::{Rgb, RgbImage};
use imae_core::backbone::MaskSpec;
use imae_core::data::{denormalize_pix, patch_stats, patchify, unpatchify};
use imae_core::imae::{predict_branches, HEAD_SUB};
use imae_core::mixer::{mix_batch, MixSpec};
use imae_core::{BackboneConfig, ImaeError, ImageBatch, ParamStore, PatchTargets, Result};
use ndarray::{s, Array3};
use serde::Serialize;

pub const COLUMNS: [&str; 4] = ["mixed", "masked", "recon-sub", "target-sub"];

/// Grey level painted over masked patches.
const MASK_GREY: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct GridRow {
    pub alpha: f64,
    /// Images in [`COLUMNS`] order, `[H, W, C]` with values in `[0, 1]`.
    pub cells: [Array3<f64>; 4],
    /// Mean squared error over masked patches, in pixel space.
    pub mse_sub: f64,
    pub mse_dom: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RowSummary {
    pub alpha: f64,
    pub label: String,
    pub mse_sub: f64,
    pub mse_dom: f64,
}

pub fn alpha_label(alpha: f64) -> String {
    format!("{alpha:.2}")
}

fn masked_mse(pred: &PatchTargets, target: &PatchTargets, mask: &MaskSpec) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for n in 0..mask.num_patches() {
        if mask.mask[[0, n]] == 1 {
            let d = &pred.patches.slice(s![0, n, ..]) - &target.patches.slice(s![0, n, ..]);
            sum += d.mapv(|v| v * v).sum();
            count += d.len();
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Predictions de-normalised with the statistics of the true target patches.
/// Map decoder output back to pixels. Models trained on per-patch normalized
/// targets predict normalized patches, which are shown with the ground-truth
/// patch mean and standard deviation.
fn to_pixels(pred: PatchTargets, target: &PatchTargets, normalized_targets: bool) -> PatchTargets {
    if normalized_targets {
        let (mean, std) = patch_stats(target);
        denormalize_pix(&pred, &mean, &std)
    } else {
        pred
    }
}

fn single(batch: &ImageBatch) -> Array3<f64> {
    batch.pixels.slice(s![0, .., .., ..]).mapv(|v| v.clamp(0.0, 1.0))
}

/// Mix `pair[0]` (weight `alpha`, the subordinate) with `pair[1]` for every
/// factor and reconstruct both members under one shared mask.
/// `normalized_targets` says whether the model was trained on per-patch
/// normalized targets.
pub fn reconstruction_rows(
    model: &BackboneConfig,
    params: &ParamStore,
    pair: &ImageBatch,
    alphas: &[f64],
    mask: &MaskSpec,
    normalized_targets: bool,
) -> Result<Vec<GridRow>> {
    if pair.len() != 2 {
        return Err(ImaeError::Shape(format!("a reconstruction pair needs 2 images, got {}", pair.len())));
    }
    if !params.contains(&format!("{HEAD_SUB}.weight")) {
        return Err(ImaeError::Config(
            "checkpoint has no disentanglement heads; reconstruct needs an i-MAE checkpoint".into(),
        ));
    }
    if mask.batch_size() != 1 {
        return Err(ImaeError::Shape("reconstruction mask must cover one image".into()));
    }
    let p = model.patch_size;
    let size = model.image_size;
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        if !(alpha > 0.0 && alpha <= 0.5) {
            return Err(ImaeError::Config(format!("mix factor {alpha} outside (0, 0.5]")));
        }
        let spec = MixSpec::new(vec![1, 0], vec![alpha, 1.0 - alpha], None)?;
        let mixed = mix_batch(pair, &spec)?;
        let one = |b: &ImageBatch| b.select(&[0]);
        let (mixed_img, sub, dom) = (one(&mixed.mixed), one(&mixed.sub), one(&mixed.dom));
        let (pred_sub, pred_dom) = predict_branches(model, params, &mixed_img, mask)?;
        let target_sub = patchify(&sub, p)?;
        let target_dom = patchify(&dom, p)?;
        let pred_sub = to_pixels(pred_sub, &target_sub, normalized_targets);
        let pred_dom = to_pixels(pred_dom, &target_dom, normalized_targets);

        let mut masked = patchify(&mixed_img, p)?;
        for n in 0..mask.num_patches() {
            if mask.mask[[0, n]] == 1 {
                masked.patches.slice_mut(s![0, n, ..]).fill(MASK_GREY);
            }
        }
        rows.push(GridRow {
            alpha,
            mse_sub: masked_mse(&pred_sub, &target_sub, mask),
            mse_dom: masked_mse(&pred_dom, &target_dom, mask),
            cells: [
                single(&mixed_img),
                single(&unpatchify(&masked, p, size, size)?),
                single(&unpatchify(&pred_sub, p, size, size)?),
                single(&sub),
            ],
        });
    }
    Ok(rows)
}

/// 3x5 bitmap glyphs, one `u8` per row with the three low bits as pixels.
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        _ => [0; 5],
    }
}

pub const GLYPH_W: u32 = 3;
pub const GLYPH_H: u32 = 5;

/// Draw `text` with its top-left corner at `(x, y)`, each font pixel `scale` wide.
pub fn draw_text(img: &mut RgbImage, text: &str, x: u32, y: u32, scale: u32, color: Rgb<u8>) {
    for (i, c) in text.chars().enumerate() {
        let x0 = x + i as u32 * (GLYPH_W + 1) * scale;
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            let (px, py) = (x0 + col * scale + dx, y + row as u32 * scale + dy);
                            if px < img.width() && py < img.height() {
                                img.put_pixel(px, py, color);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Geometry of a rendered grid, in output pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridLayout {
    pub cell: u32,
    pub gap: u32,
    pub label_width: u32,
    pub font_scale: u32,
    pub rows: u32,
}

impl GridLayout {
    pub fn new(image_size: usize, scale: usize, rows: usize) -> Self {
        let scale = scale.max(1) as u32;
        let font_scale = (scale / 2).max(1);
        Self {
            cell: image_size as u32 * scale,
            gap: scale,
            label_width: 4 * (GLYPH_W + 1) * font_scale + 2 * scale,
            font_scale,
            rows: rows as u32,
        }
    }

    pub fn width(&self) -> u32 {
        self.label_width + COLUMNS.len() as u32 * (self.cell + self.gap) + self.gap
    }

    pub fn height(&self) -> u32 {
        self.rows * (self.cell + self.gap) + self.gap
    }

    /// Top-left corner of cell `(row, col)`.
    pub fn origin(&self, row: u32, col: u32) -> (u32, u32) {
        (
            self.label_width + self.gap + col * (self.cell + self.gap),
            self.gap + row * (self.cell + self.gap),
        )
    }
}

pub fn render_grid(rows: &[GridRow], scale: usize) -> RgbImage {
    let image_size = rows.first().map_or(0, |r| r.cells[0].dim().0);
    let layout = GridLayout::new(image_size, scale, rows.len());
    let mut img = RgbImage::from_pixel(layout.width(), layout.height(), Rgb([255, 255, 255]));
    let px = layout.cell / image_size.max(1) as u32;
    for (r, row) in rows.iter().enumerate() {
        let (_, y0) = layout.origin(r as u32, 0);
        let text_y = y0 + (layout.cell.saturating_sub(GLYPH_H * layout.font_scale)) / 2;
        draw_text(&mut img, &alpha_label(row.alpha), layout.gap, text_y, layout.font_scale, Rgb([0, 0, 0]));
        for (c, cell) in row.cells.iter().enumerate() {
            let (x0, y0) = layout.origin(r as u32, c as u32);
            let (h, w, channels) = cell.dim();
            for y in 0..h {
                for x in 0..w {
                    // Grey-scale images repeat their single channel.
                    let channel = |k: usize| to_u8(cell[[y, x, k.min(channels - 1)]]);
                    let color = Rgb([channel(0), channel(1), channel(2)]);
                    for dy in 0..px {
                        for dx in 0..px {
                            img.put_pixel(x0 + x as u32 * px + dx, y0 + y as u32 * px + dy, color);
                        }
                    }
                }
            }
        }
    }
    img
}

pub fn summaries(rows: &[GridRow]) -> Vec<RowSummary> {
    rows.iter()
        .map(|r| RowSummary {
            alpha: r.alpha,
            label: alpha_label(r.alpha),
            mse_sub: r.mse_sub,
            mse_dom: r.mse_dom,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(alpha: f64, size: usize) -> GridRow {
        let cell = Array3::from_shape_fn((size, size, 3), |(y, x, c)| (y * size + x + c) as f64 / (size * size + 2) as f64);
        GridRow {
            alpha,
            cells: [cell.clone(), cell.clone(), cell.clone(), cell],
            mse_sub: 0.0,
            mse_dom: 0.0,
        }
    }

    #[test]
    fn layout_has_one_band_per_alpha_and_four_columns() {
        let rows: Vec<GridRow> = [0.05, 0.25, 0.5].iter().map(|&a| row(a, 8)).collect();
        let img = render_grid(&rows, 2);
        let l = GridLayout::new(8, 2, 3);
        assert_eq!((img.width(), img.height()), (l.width(), l.height()));
        assert_eq!(l.height(), 3 * (16 + 2) + 2);
        // Top-left pixel of the last cell carries the image content.
        let (x, y) = l.origin(2, 3);
        assert_eq!(img.get_pixel(x, y)[0], to_u8(rows[2].cells[3][[0, 0, 0]]));
    }

    #[test]
    fn normalized_predictions_take_the_target_patch_statistics() {
        let target = PatchTargets {
            patches: ndarray::Array3::from_shape_fn((1, 2, 4), |(_, n, k)| 0.2 + 0.1 * n as f64 + 0.05 * k as f64),
            normalized: false,
        };
        let zeros = PatchTargets {
            patches: ndarray::Array3::zeros((1, 2, 4)),
            normalized: false,
        };
        let shown = to_pixels(zeros.clone(), &target, true);
        for n in 0..2 {
            let mean = target.patches.slice(s![0, n, ..]).mean().unwrap();
            assert!(shown.patches.slice(s![0, n, ..]).iter().all(|v| (v - mean).abs() < 1e-12));
        }
        assert_eq!(to_pixels(zeros.clone(), &target, false).patches, zeros.patches);
    }

    #[test]
    fn labels_draw_ink_in_the_margin() {
        let rows = vec![row(0.5, 8)];
        let img = render_grid(&rows, 4);
        let l = GridLayout::new(8, 4, 1);
        let ink = (0..l.label_width)
            .flat_map(|x| (0..l.height()).map(move |y| (x, y)))
            .filter(|&(x, y)| img.get_pixel(x, y)[0] == 0)
            .count() as u32;
        let font_px: u32 = ["0", ".", "5", "0"]
            .iter()
            .map(|c| glyph(c.chars().next().unwrap()).iter().map(|b| b.count_ones()).sum::<u32>())
            .sum();
        assert_eq!(ink, font_px * l.font_scale * l.font_scale);
        assert_eq!(alpha_label(0.05), "0.05");
    }
}
