//! Canvas, overlapping patch grid, per-pixel coverage and guidance windows.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Shape;

/// Dimensions of the global canvas being sampled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanvasSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl CanvasSpec {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Geometry(format!(
                "canvas dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
        })
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BorderPolicy {
    /// `(L - patch) % stride == 0` is required on both axes.
    ExactTiling,
    /// The last origin on each axis is pulled back so the patch ends on the border.
    #[default]
    ClampLast,
}

impl std::str::FromStr for BorderPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact-tiling" | "exact" => Ok(BorderPolicy::ExactTiling),
            "clamp-last" | "clamp" => Ok(BorderPolicy::ClampLast),
            other => Err(Error::Config(format!("unknown border policy `{other}`"))),
        }
    }
}

impl fmt::Display for BorderPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BorderPolicy::ExactTiling => "exact-tiling",
            BorderPolicy::ClampLast => "clamp-last",
        })
    }
}

/// Origins along one axis of length `len` for windows of size `patch` at `stride`.
pub fn axis_origins(len: usize, patch: usize, stride: usize, policy: BorderPolicy) -> Result<Vec<usize>> {
    if patch == 0 || stride == 0 {
        return Err(Error::Geometry("patch size and stride must be positive".into()));
    }
    if stride > patch {
        return Err(Error::Geometry(format!(
            "stride {stride} exceeds patch size {patch}; coverage would have gaps"
        )));
    }
    if patch > len {
        return Err(Error::Geometry(format!(
            "patch size {patch} exceeds canvas extent {len}"
        )));
    }
    let last = len - patch;
    match policy {
        BorderPolicy::ExactTiling => {
            if last % stride != 0 {
                return Err(Error::Geometry(format!(
                    "exact tiling violated: ({len} - {patch}) mod {stride} = {}",
                    last % stride
                )));
            }
            Ok((0..=last).step_by(stride).collect())
        }
        BorderPolicy::ClampLast => {
            let mut origins = vec![0];
            let mut o = 0;
            while o < last {
                o = (o + stride).min(last);
                origins.push(o);
            }
            Ok(origins)
        }
    }
}

/// Indices of the origins whose window `[o, o + patch)` contains `pos`.
/// Origins must be sorted; the result is a contiguous index range.
pub fn covering(origins: &[usize], patch: usize, pos: usize) -> Range<usize> {
    let end = origins.partition_point(|&o| o <= pos);
    let start = origins.partition_point(|&o| o + patch <= pos);
    start..end.max(start)
}

/// Serializable grid parameters (everything but the canvas).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride_y: usize,
    pub stride_x: usize,
    #[serde(default)]
    pub border_policy: BorderPolicy,
}

impl GridSpec {
    pub fn square(patch: usize, stride: usize, border_policy: BorderPolicy) -> Self {
        Self {
            patch_h: patch,
            patch_w: patch,
            stride_y: stride,
            stride_x: stride,
            border_policy,
        }
    }
}

/// Overlapping rectangular patch grid over a canvas.
///
/// Patch origins form the product of per-axis origin lists; patch index
/// `k = row_index * cols + col_index` is therefore row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    canvas: CanvasSpec,
    spec: GridSpec,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

impl PatchGrid {
    pub fn new(canvas: CanvasSpec, spec: GridSpec) -> Result<Self> {
        let rows = axis_origins(canvas.height, spec.patch_h, spec.stride_y, spec.border_policy)?;
        let cols = axis_origins(canvas.width, spec.patch_w, spec.stride_x, spec.border_policy)?;
        Ok(Self {
            canvas,
            spec,
            rows,
            cols,
        })
    }

    pub fn build(
        canvas: CanvasSpec,
        patch_h: usize,
        patch_w: usize,
        stride_y: usize,
        stride_x: usize,
        border_policy: BorderPolicy,
    ) -> Result<Self> {
        Self::new(
            canvas,
            GridSpec {
                patch_h,
                patch_w,
                stride_y,
                stride_x,
                border_policy,
            },
        )
    }

    pub fn canvas(&self) -> CanvasSpec {
        self.canvas
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn patch_h(&self) -> usize {
        self.spec.patch_h
    }

    pub fn patch_w(&self) -> usize {
        self.spec.patch_w
    }

    pub fn patch_shape(&self) -> Shape {
        Shape::new(self.spec.patch_h, self.spec.patch_w, self.canvas.channels)
    }

    pub fn row_origins(&self) -> &[usize] {
        &self.rows
    }

    pub fn col_origins(&self) -> &[usize] {
        &self.cols
    }

    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-left corner of patch `k`.
    #[inline]
    pub fn origin(&self, k: usize) -> (usize, usize) {
        let n = self.cols.len();
        (self.rows[k / n], self.cols[k % n])
    }

    /// `(row_index, col_index)` of patch `k` in the origin lists.
    #[inline]
    pub fn grid_position(&self, k: usize) -> (usize, usize) {
        (k / self.cols.len(), k % self.cols.len())
    }

    #[inline]
    pub fn index_of(&self, row_index: usize, col_index: usize) -> usize {
        row_index * self.cols.len() + col_index
    }

    /// All origins, row-major.
    pub fn origins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows
            .iter()
            .flat_map(move |&r| self.cols.iter().map(move |&c| (r, c)))
    }

    /// Row and column index ranges of the patches covering `(row, col)`.
    #[inline]
    pub fn covering_ranges(&self, row: usize, col: usize) -> (Range<usize>, Range<usize>) {
        (
            covering(&self.rows, self.spec.patch_h, row),
            covering(&self.cols, self.spec.patch_w, col),
        )
    }

    /// Patch indices covering pixel `p`, ascending.
    pub fn coverage_at(&self, row: usize, col: usize) -> Result<Vec<usize>> {
        if row >= self.canvas.height || col >= self.canvas.width {
            return Err(Error::OutOfBounds {
                row,
                col,
                height: self.canvas.height,
                width: self.canvas.width,
            });
        }
        let (rr, cr) = self.covering_ranges(row, col);
        Ok(rr
            .flat_map(|ri| cr.clone().map(move |ci| self.index_of(ri, ci)))
            .collect())
    }

    /// Largest number of patches covering any single pixel.
    pub fn max_cover(&self) -> usize {
        max_axis_cover(&self.rows, self.spec.patch_h, self.canvas.height)
            * max_axis_cover(&self.cols, self.spec.patch_w, self.canvas.width)
    }

    /// Position of patch `k` among the (ascending) patches covering `(row, col)`.
    /// `row`/`col` must lie inside patch `k`.
    #[inline]
    pub fn slot_of(&self, k: usize, row: usize, col: usize) -> usize {
        let (ri, ci) = self.grid_position(k);
        let (rr, cr) = self.covering_ranges(row, col);
        debug_assert!(rr.contains(&ri) && cr.contains(&ci));
        (ri - rr.start) * cr.len() + (ci - cr.start)
    }

    /// True when no pixel is covered more than once.
    pub fn is_non_overlapping(&self) -> bool {
        self.max_cover() == 1
    }

    /// True when origins are evenly spaced on both axes (always the case for exact tiling).
    pub fn is_periodic(&self) -> bool {
        let even = |o: &[usize], s: usize| o.windows(2).all(|w| w[1] - w[0] == s);
        even(&self.rows, self.spec.stride_y) && even(&self.cols, self.spec.stride_x)
    }

    /// Grid lines (pixel index of the second pixel of a cross-boundary pair)
    /// strictly inside the canvas, per axis.
    pub fn boundary_lines(&self) -> (Vec<usize>, Vec<usize>) {
        fn lines(origins: &[usize], patch: usize, len: usize) -> Vec<usize> {
            let mut v: Vec<usize> = origins
                .iter()
                .flat_map(|&o| [o, o + patch])
                .filter(|&b| b > 0 && b < len)
                .collect();
            v.sort_unstable();
            v.dedup();
            v
        }
        (
            lines(&self.rows, self.spec.patch_h, self.canvas.height),
            lines(&self.cols, self.spec.patch_w, self.canvas.width),
        )
    }
}

fn max_axis_cover(origins: &[usize], patch: usize, len: usize) -> usize {
    // Cover counts only change at window edges, so checking origins suffices.
    origins
        .iter()
        .flat_map(|&o| [o, (o + patch).min(len - 1)])
        .map(|p| covering(origins, patch, p).len())
        .max()
        .unwrap_or(0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WindowSpec {
    #[default]
    Constant,
    Gaussian {
        /// Defaults to a quarter of the patch height.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma: Option<f64>,
    },
    LinearRamp,
}

impl WindowSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            WindowSpec::Constant => "constant",
            WindowSpec::Gaussian { .. } => "gaussian",
            WindowSpec::LinearRamp => "linear-ramp",
        }
    }

    pub fn parse(kind: &str, sigma: Option<f64>) -> Result<Self> {
        match kind {
            "constant" => Ok(WindowSpec::Constant),
            "gaussian" => Ok(WindowSpec::Gaussian { sigma }),
            "linear-ramp" | "ramp" => Ok(WindowSpec::LinearRamp),
            other => Err(Error::Config(format!("unknown window kind `{other}`"))),
        }
    }

    pub fn build(&self, h: usize, w: usize) -> Result<WeightWindow> {
        match *self {
            WindowSpec::Constant => Ok(WeightWindow::constant(h, w)),
            WindowSpec::Gaussian { sigma } => WeightWindow::gaussian(h, w, sigma.unwrap_or(h as f64 / 4.0)),
            WindowSpec::LinearRamp => Ok(WeightWindow::linear_ramp(h, w)),
        }
    }
}

/// Per-pixel guidance weights applied identically to every patch.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightWindow {
    spec: WindowSpec,
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl WeightWindow {
    pub fn constant(h: usize, w: usize) -> Self {
        Self {
            spec: WindowSpec::Constant,
            h,
            w,
            values: vec![1.0; h * w],
        }
    }

    /// `exp(-((i - h/2)^2 + (j - w/2)^2) / (2 sigma^2))` with integer pixel indices.
    pub fn gaussian(h: usize, w: usize, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Geometry(format!("gaussian sigma must be positive, got {sigma}")));
        }
        let (ch, cw) = (h as f64 / 2.0, w as f64 / 2.0);
        let denom = 2.0 * sigma * sigma;
        let values: Vec<f64> = (0..h)
            .flat_map(|i| {
                (0..w).map(move |j| {
                    let (di, dj) = (i as f64 - ch, j as f64 - cw);
                    (-(di * di + dj * dj) / denom).exp()
                })
            })
            .collect();
        if values.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Geometry(format!(
                "gaussian sigma {sigma} underflows to zero weight inside a {h}x{w} patch"
            )));
        }
        Ok(Self {
            spec: WindowSpec::Gaussian { sigma: Some(sigma) },
            h,
            w,
            values,
        })
    }

    /// Separable tent peaking at the patch center, strictly positive at the edges.
    pub fn linear_ramp(h: usize, w: usize) -> Self {
        let ramp = |n: usize| -> Vec<f64> {
            let peak = n.div_ceil(2) as f64;
            (0..n).map(|i| (i + 1).min(n - i) as f64 / peak).collect()
        };
        let (rv, cv) = (ramp(h), ramp(w));
        let values = rv.iter().flat_map(|a| cv.iter().map(move |b| a * b)).collect();
        Self {
            spec: WindowSpec::LinearRamp,
            h,
            w,
            values,
        }
    }

    #[cfg(test)]
    pub(crate) fn from_values(h: usize, w: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), h * w);
        Self {
            spec: WindowSpec::Constant,
            h,
            w,
            values,
        }
    }

    pub fn spec(&self) -> WindowSpec {
        self.spec
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.w + j]
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.spec, WindowSpec::Constant)
    }

    pub fn ensure_fits(&self, grid: &PatchGrid) -> Result<()> {
        if self.h != grid.patch_h() || self.w != grid.patch_w() {
            return Err(Error::shape(
                format!("{}x{} window", grid.patch_h(), grid.patch_w()),
                format!("{}x{}", self.h, self.w),
            ));
        }
        Ok(())
    }
}

/// Text manifest describing a sampling layout: canvas, grid, window and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridManifest {
    pub canvas: CanvasSpec,
    pub grid: GridSpec,
    pub window: WindowSpec,
    pub master_seed: u64,
}

impl GridManifest {
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("grid manifest serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("grid manifest: {e}")))
    }
}
