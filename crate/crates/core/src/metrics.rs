//! Whole-scene quality metrics and the FID patch-set exporter.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axis_origins, BorderPolicy, PatchGrid};
use crate::raster::{save_png, Raster};

/// Largest value of 8-bit imagery.
pub const MAX_8BIT: f64 = 255.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fidelity {
    pub rmse: f64,
    /// `+inf` for identical images.
    pub psnr: f64,
}

/// RMSE over all pixels and channels pooled, and `20 log10(max / rmse)`.
pub fn rmse_psnr(reference: &Raster, candidate: &Raster, max_value: f64) -> Result<Fidelity> {
    reference.ensure_same_shape(candidate)?;
    let n = reference.data().len() as f64;
    let mse = reference
        .data()
        .iter()
        .zip(candidate.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let rmse = mse.sqrt();
    let psnr = if rmse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (max_value / rmse).log10()
    };
    Ok(Fidelity { rmse, psnr })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over the valid region, averaged over channels.
pub fn ssim(reference: &Raster, candidate: &Raster, window: usize, sigma: f64, max_value: f64) -> Result<f64> {
    reference.ensure_same_shape(candidate)?;
    let (h, w, ch) = (reference.height(), reference.width(), reference.channels());
    if window == 0 || h < window || w < window {
        return Err(Error::Invalid(format!(
            "image {h}x{w} smaller than the {window}x{window} SSIM window"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::Invalid(format!("SSIM window sigma must be positive, got {sigma}")));
    }
    let g = gaussian_kernel(window, sigma);
    let c1 = (0.01 * max_value).powi(2);
    let c2 = (0.03 * max_value).powi(2);
    let (oh, ow) = (h - window + 1, w - window + 1);

    // Separable filtering of x, y, x^2, y^2, xy over the valid region.
    let filter = |f: &dyn Fn(usize, usize) -> f64| -> Vec<f64> {
        let mut rows = vec![0.0; h * ow];
        for y in 0..h {
            for x in 0..ow {
                rows[y * ow + x] = (0..window).map(|k| g[k] * f(y, x + k)).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..window).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
            }
        }
        out
    };

    let mut total = 0.0;
    for c in 0..ch {
        let a = |y, x| reference.get(y, x, c);
        let b = |y, x| candidate.get(y, x, c);
        let mx = filter(&a);
        let my = filter(&b);
        let mxx = filter(&|y, x| a(y, x) * a(y, x));
        let myy = filter(&|y, x| b(y, x) * b(y, x));
        let mxy = filter(&|y, x| a(y, x) * b(y, x));
        let mut sum = 0.0;
        for i in 0..oh * ow {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / (oh * ow) as f64;
    }
    Ok(total / ch as f64)
}

/// Ratio of the mean absolute first difference across interior patch
/// boundaries to the mean absolute first difference everywhere else.
/// 1.0 means no detectable seam; a constant image reports 1.0.
pub fn seam_index(image: &Raster, grid: &PatchGrid) -> Result<f64> {
    let canvas = grid.canvas();
    if (image.height(), image.width()) != (canvas.height, canvas.width) {
        return Err(Error::shape(
            format!("{}x{} image", canvas.height, canvas.width),
            image.shape(),
        ));
    }
    let (row_lines, col_lines) = grid.boundary_lines();
    if row_lines.is_empty() && col_lines.is_empty() {
        return Err(Error::Geometry("grid has no interior patch boundaries".into()));
    }
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let mut is_row_line = vec![false; h];
    row_lines.iter().for_each(|&y| is_row_line[y] = true);
    let mut is_col_line = vec![false; w];
    col_lines.iter().for_each(|&x| is_col_line[x] = true);

    let (mut seam, mut seam_n, mut rest, mut rest_n) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let v = image.get(y, x, c);
                if x > 0 {
                    let d = (v - image.get(y, x - 1, c)).abs();
                    if is_col_line[x] {
                        seam += d;
                        seam_n += 1;
                    } else {
                        rest += d;
                        rest_n += 1;
                    }
                }
                if y > 0 {
                    let d = (v - image.get(y - 1, x, c)).abs();
                    if is_row_line[y] {
                        seam += d;
                        seam_n += 1;
                    } else {
                        rest += d;
                        rest_n += 1;
                    }
                }
            }
        }
    }
    let seam_mean = seam / seam_n as f64;
    let rest_mean = if rest_n == 0 { 0.0 } else { rest / rest_n as f64 };
    Ok(match (seam_mean == 0.0, rest_mean == 0.0) {
        (true, true) => 1.0,
        (false, true) => f64::INFINITY,
        _ => seam_mean / rest_mean,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_masks(pred: &Raster, truth: &Raster) -> Result<Self> {
        pred.ensure_same_shape(truth)?;
        let binary = |v: f64| v == 0.0 || v == 1.0;
        if !pred.data().iter().chain(truth.data()).all(|&v| binary(v)) {
            return Err(Error::Invalid("segmentation masks must contain only 0 and 1".into()));
        }
        let mut c = Self::default();
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            match (p == 1.0, t == 1.0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    /// Scores with empty-set sentinels: a ratio whose denominator is zero is
    /// 1.0 when prediction and truth are both empty, 0.0 otherwise.
    pub fn scores(&self) -> SegmentationScores {
        let (tp, fp, fn_, tn) = (self.tp as f64, self.fp as f64, self.fn_ as f64, self.tn as f64);
        let both_empty = self.tp + self.fp + self.fn_ == 0;
        let ratio = |num: f64, den: f64| {
            if den > 0.0 {
                num / den
            } else if both_empty {
                1.0
            } else {
                0.0
            }
        };
        let total = tp + fp + fn_ + tn;
        SegmentationScores {
            accuracy: ratio(tp + tn, total),
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
            iou: ratio(tp, tp + fp + fn_),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

pub fn segmentation_scores(pred: &Raster, truth: &Raster) -> Result<SegmentationScores> {
    Ok(Confusion::from_masks(pred, truth)?.scores())
}

pub const FID_PATCH: usize = 299;
/// Quarter of the patch size, floored: 75% overlap.
pub const FID_STRIDE: usize = FID_PATCH / 4;

/// Origins of the FID crops along both axes.
pub fn fid_origins(height: usize, width: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if height < FID_PATCH || width < FID_PATCH {
        return Err(Error::Invalid(format!(
            "image {height}x{width} smaller than the {FID_PATCH}x{FID_PATCH} FID patch"
        )));
    }
    Ok((
        axis_origins(height, FID_PATCH, FID_STRIDE, BorderPolicy::ClampLast)?,
        axis_origins(width, FID_PATCH, FID_STRIDE, BorderPolicy::ClampLast)?,
    ))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FidExport {
    pub patch_size: usize,
    pub stride: usize,
    pub patch: Vec<FidPatch>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FidPatch {
    pub file: String,
    pub row: usize,
    pub col: usize,
}

/// Write every 299x299 crop (pixel values 0..=255) as PNG into `out`, plus `manifest.toml`.
pub fn fid_patch_export(image: &Raster, out: &Path) -> Result<FidExport> {
    let (rows, cols) = fid_origins(image.height(), image.width())?;
    std::fs::create_dir_all(out)?;
    let mut patch = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            let file = format!("patch_r{r:05}_c{c:05}.png");
            save_png(&out.join(&file), &image.crop(r, c, FID_PATCH, FID_PATCH)?)?;
            patch.push(FidPatch { file, row: r, col: c });
        }
    }
    let export = FidExport {
        patch_size: FID_PATCH,
        stride: FID_STRIDE,
        patch,
    };
    std::fs::write(
        out.join("manifest.toml"),
        toml::to_string(&export).expect("export manifest serializes"),
    )?;
    Ok(export)
}

/// Collected scene metrics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rmse: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub seam_index: Option<f64>,
    pub segmentation: Option<SegmentationScores>,
    pub fid_patches: Option<(usize, PathBuf)>,
}

impl MetricReport {
    fn entries(&self) -> Vec<(&'static str, f64)> {
        let mut v = Vec::new();
        let mut push = |k, x: Option<f64>| {
            if let Some(x) = x {
                v.push((k, x));
            }
        };
        push("rmse", self.rmse);
        push("psnr", self.psnr);
        push("ssim", self.ssim);
        push("seam_index", self.seam_index);
        if let Some(s) = self.segmentation {
            push("accuracy", Some(s.accuracy));
            push("precision", Some(s.precision));
            push("recall", Some(s.recall));
            push("f1", Some(s.f1));
            push("iou", Some(s.iou));
        }
        v
    }

    /// JSON object; infinite values become the string `"inf"`.
    pub fn to_json(&self) -> String {
        let mut map = serde_json::Map::new();
        for (k, v) in self.entries() {
            let value = if v.is_finite() {
                serde_json::json!(v)
            } else {
                serde_json::json!(if v > 0.0 { "inf" } else { "-inf" })
            };
            map.insert(k.to_string(), value);
        }
        if let Some((n, dir)) = &self.fid_patches {
            map.insert("fid_patches".into(), serde_json::json!(n));
            map.insert("fid_dir".into(), serde_json::json!(dir.display().to_string()));
        }
        serde_json::to_string_pretty(&serde_json::Value::Object(map)).expect("report serializes")
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k}: {v}")?;
        }
        if let Some((n, dir)) = &self.fid_patches {
            writeln!(f, "fid_patches: {n}")?;
            writeln!(f, "fid_dir: {}", dir.display())?;
        }
        Ok(())
    }
}
