//! Gaussian-weighted sliding-window blending of per-patch probability maps.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{read_grid, write_grid, Dtype, Raster, Shape};

/// Default mask threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `exp(-((i - S/2)^2 + (j - S/2)^2) / (2 sigma^2))` on integer offsets.
pub fn gaussian_blend_window(size: usize, sigma: f64) -> Result<Raster> {
    if size == 0 {
        return Err(Error::Invalid("blend window size must be at least 1".into()));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Invalid(format!("blend window sigma must be positive, got {sigma}")));
    }
    let center = size as f64 / 2.0;
    let denom = 2.0 * sigma * sigma;
    Ok(Raster::from_fn(Shape::new(size, size, 1), |i, j, _| {
        let (di, dj) = (i as f64 - center, j as f64 - center);
        (-(di * di + dj * dj) / denom).exp()
    }))
}

/// One patch prediction placed on the canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPrediction {
    pub origin: (usize, usize),
    /// `S x S x K` class probabilities.
    pub probabilities: Raster,
}

/// Running numerator `sum P_k W_k` and denominator `sum W_k`.
#[derive(Clone, Debug)]
pub struct BlendAccumulator {
    numerator: Raster,
    denominator: Vec<f64>,
}

impl BlendAccumulator {
    pub fn new(height: usize, width: usize, classes: usize) -> Self {
        Self {
            numerator: Raster::zeros(Shape::new(height, width, classes)),
            denominator: vec![0.0; height * width],
        }
    }

    pub fn add(&mut self, patch: &PatchPrediction, window: &Raster) -> Result<()> {
        let p = &patch.probabilities;
        let (h, w) = (p.height(), p.width());
        if (window.height(), window.width()) != (h, w) || window.channels() != 1 {
            return Err(Error::shape(format!("{h}x{w}x1 window"), window.shape()));
        }
        let k = self.numerator.channels();
        if p.channels() != k {
            return Err(Error::shape(format!("{k} classes"), p.shape()));
        }
        let (r0, c0) = patch.origin;
        let (ch, cw) = (self.numerator.height(), self.numerator.width());
        if r0 + h > ch || c0 + w > cw {
            return Err(Error::Invalid(format!(
                "patch {h}x{w} at ({r0}, {c0}) exceeds {ch}x{cw} canvas"
            )));
        }
        for i in 0..h {
            for j in 0..w {
                let wt = window.get(i, j, 0);
                self.denominator[(r0 + i) * cw + c0 + j] += wt;
                let base = self.numerator.index(r0 + i, c0 + j, 0);
                for (c, v) in p.pixel(i, j).iter().enumerate() {
                    self.numerator.data_mut()[base + c] += wt * v;
                }
            }
        }
        Ok(())
    }

    /// Normalize; every pixel must have received weight.
    pub fn finish(self) -> Result<Raster> {
        let (h, w) = (self.numerator.height(), self.numerator.width());
        let gaps: Vec<(usize, usize)> = (0..h * w)
            .filter(|&p| !(self.denominator[p] > 0.0))
            .map(|p| (p / w, p % w))
            .collect();
        if let Some(&(r, c)) = gaps.first() {
            let (rmin, rmax) = gaps.iter().fold((r, r), |(a, b), &(y, _)| (a.min(y), b.max(y)));
            let (cmin, cmax) = gaps.iter().fold((c, c), |(a, b), &(_, x)| (a.min(x), b.max(x)));
            return Err(Error::Coverage(format!(
                "{} uncovered pixels in rows {rmin}..={rmax}, cols {cmin}..={cmax}",
                gaps.len()
            )));
        }
        let mut out = self.numerator;
        let k = out.channels();
        for (p, px) in out.data_mut().chunks_mut(k).enumerate() {
            let d = self.denominator[p];
            px.iter_mut().for_each(|v| *v /= d);
        }
        Ok(out)
    }
}

/// `P_final = sum P_k W_k / sum W_k` over all patches.
pub fn blend_predictions(
    patches: &[PatchPrediction],
    height: usize,
    width: usize,
    window: &Raster,
) -> Result<Raster> {
    let classes = patches
        .first()
        .ok_or_else(|| Error::Invalid("no patch predictions to blend".into()))?
        .probabilities
        .channels();
    let mut acc = BlendAccumulator::new(height, width, classes);
    for p in patches {
        acc.add(p, window)?;
    }
    acc.finish()
}

/// Binary mask of `probabilities >= threshold`.
pub fn threshold_mask(probabilities: &Raster, threshold: f64) -> Raster {
    probabilities.map(|v| if v >= threshold { 1.0 } else { 0.0 })
}

#[derive(Debug, Serialize, Deserialize)]
struct PatchList {
    height: usize,
    width: usize,
    patch: Vec<PatchEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PatchEntry {
    row: usize,
    col: usize,
    /// Flat grid base path, relative to the list file.
    grid: String,
}

/// Read a patch list (`patches.toml` with `height`, `width` and `[[patch]]`
/// entries naming flat grids) into canvas dims and predictions.
pub fn read_patch_list(path: &Path) -> Result<(usize, usize, Vec<PatchPrediction>)> {
    let text = std::fs::read_to_string(path)?;
    let list: PatchList = toml::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let patches = list
        .patch
        .iter()
        .map(|e| {
            let (probabilities, _) = read_grid(&dir.join(&e.grid))?;
            Ok(PatchPrediction {
                origin: (e.row, e.col),
                probabilities,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((list.height, list.width, patches))
}

/// Write predictions as flat grids plus a patch list next to them.
pub fn write_patch_list(path: &Path, height: usize, width: usize, patches: &[PatchPrediction]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(patches.len());
    for (i, p) in patches.iter().enumerate() {
        let name = format!("patch_{i:05}");
        let mut meta = BTreeMap::new();
        meta.insert("row".into(), p.origin.0.to_string());
        meta.insert("col".into(), p.origin.1.to_string());
        write_grid(&dir.join(&name), &p.probabilities, Dtype::F32, meta)?;
        entries.push(PatchEntry {
            row: p.origin.0,
            col: p.origin.1,
            grid: name,
        });
    }
    let list = PatchList {
        height,
        width,
        patch: entries,
    };
    std::fs::write(path, toml::to_string(&list).expect("patch list serializes"))?;
    Ok(())
}
