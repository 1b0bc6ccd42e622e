//! Normalization fields `W(p) = sum w_k(p)`, `S(p) = sqrt(sum w_k(p)^2)`, the
//! variance erosion factor `lambda = (S / W)^2`, and the per-patch gain/shift
//! coefficients of the factorized corrected fusion:
//!
//! ```text
//! gain_k(p)  = w_k(p) / S(p)
//! shift_k(p) = w_k(p) * (1 / W(p) - 1 / S(p))
//! ```
//!
//! Coefficients can come from the materialized global field, from local
//! geometry (the weights covering a pixel are enumerable from the grid alone),
//! or from cached periodic tiles on evenly spaced grids.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::{BorderPolicy, PatchGrid, WeightWindow};
use crate::raster::{Raster, Shape};

/// Global `W` and `S` maps over the canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationField {
    height: usize,
    width: usize,
    wmap: Vec<f64>,
    smap: Vec<f64>,
}

impl NormalizationField {
    /// Exact sums over the covering patches of every pixel.
    pub fn compute(grid: &PatchGrid, window: &WeightWindow) -> Result<Self> {
        window.ensure_fits(grid)?;
        let canvas = grid.canvas();
        let (h, w) = (grid.patch_h(), grid.patch_w());
        let mut wmap = vec![0.0; canvas.pixels()];
        let mut sq = vec![0.0; canvas.pixels()];
        for (r, c) in grid.origins() {
            for i in 0..h {
                let row = (r + i) * canvas.width + c;
                for j in 0..w {
                    let v = window.at(i, j);
                    wmap[row + j] += v;
                    sq[row + j] += v * v;
                }
            }
        }
        let smap = sq.into_iter().map(f64::sqrt).collect();
        Ok(Self {
            height: canvas.height,
            width: canvas.width,
            wmap,
            smap,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn w(&self, row: usize, col: usize) -> f64 {
        self.wmap[row * self.width + col]
    }

    #[inline]
    pub fn s(&self, row: usize, col: usize) -> f64 {
        self.smap[row * self.width + col]
    }

    /// `lambda(p) = (S(p) / W(p))^2`, in `(0, 1]`.
    #[inline]
    pub fn lambda(&self, row: usize, col: usize) -> f64 {
        let r = self.s(row, col) / self.w(row, col);
        r * r
    }

    pub fn erosion_factor(&self, row: usize, col: usize) -> Result<f64> {
        if row >= self.height || col >= self.width {
            return Err(Error::OutOfBounds {
                row,
                col,
                height: self.height,
                width: self.width,
            });
        }
        Ok(self.lambda(row, col))
    }

    fn map(&self, f: impl Fn(usize, usize) -> f64) -> Raster {
        Raster::from_fn(Shape::new(self.height, self.width, 1), |y, x, _| f(y, x))
    }

    pub fn w_raster(&self) -> Raster {
        self.map(|y, x| self.w(y, x))
    }

    pub fn s_raster(&self) -> Raster {
        self.map(|y, x| self.s(y, x))
    }

    pub fn lambda_raster(&self) -> Raster {
        self.map(|y, x| self.lambda(y, x))
    }

    /// Gain/shift for patch `k`, read off the materialized field.
    pub fn patch_coefficients(&self, grid: &PatchGrid, window: &WeightWindow, k: usize) -> PatchCoefficients {
        let (r, c) = grid.origin(k);
        PatchCoefficients::from_fn(grid.patch_h(), grid.patch_w(), |i, j| {
            (window.at(i, j), self.w(r + i, c + j), self.s(r + i, c + j))
        })
    }

    pub fn extrema(&self) -> FieldExtrema {
        let mut e = FieldExtrema::default();
        for y in 0..self.height {
            for x in 0..self.width {
                e.w.push(self.w(y, x));
                e.s.push(self.s(y, x));
                e.lambda.push(self.lambda(y, x));
            }
        }
        e
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Default for Range {
    fn default() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }
}

impl Range {
    fn push(&mut self, v: f64) {
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FieldExtrema {
    pub w: Range,
    pub s: Range,
    pub lambda: Range,
}

/// `sum w^2 / (sum w)^2` for the weights covering one pixel.
pub fn erosion_from_weights(weights: &[f64]) -> f64 {
    let sum: f64 = weights.iter().sum();
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    sq / (sum * sum)
}

/// `(W, S)` at global pixel `(row, col)` computed from the grid geometry alone.
pub fn local_normalization(grid: &PatchGrid, window: &WeightWindow, row: usize, col: usize) -> (f64, f64) {
    let (rr, cr) = grid.covering_ranges(row, col);
    let (rows, cols) = (grid.row_origins(), grid.col_origins());
    let (mut w, mut sq) = (0.0, 0.0);
    for ri in rr {
        let i = row - rows[ri];
        for ci in cr.clone() {
            let v = window.at(i, col - cols[ci]);
            w += v;
            sq += v * v;
        }
    }
    (w, sq.sqrt())
}

/// Gain and shift maps for one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchCoefficients {
    h: usize,
    w: usize,
    gain: Vec<f64>,
    shift: Vec<f64>,
}

impl PatchCoefficients {
    /// Build from a per-pixel `(w_k, W, S)` triple.
    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> (f64, f64, f64)) -> Self {
        let mut gain = Vec::with_capacity(h * w);
        let mut shift = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let (wk, big_w, big_s) = f(i, j);
                gain.push(wk / big_s);
                shift.push(wk * (1.0 / big_w - 1.0 / big_s));
            }
        }
        Self { h, w, gain, shift }
    }

    /// Coefficients of patch `k` from local geometry, no global field needed.
    pub fn local(grid: &PatchGrid, window: &WeightWindow, k: usize) -> Self {
        let (r, c) = grid.origin(k);
        Self::from_fn(grid.patch_h(), grid.patch_w(), |i, j| {
            let (big_w, big_s) = local_normalization(grid, window, r + i, c + j);
            (window.at(i, j), big_w, big_s)
        })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn gain(&self, i: usize, j: usize) -> f64 {
        self.gain[i * self.w + j]
    }

    #[inline]
    pub fn shift(&self, i: usize, j: usize) -> f64 {
        self.shift[i * self.w + j]
    }

    pub fn gains(&self) -> &[f64] {
        &self.gain
    }

    pub fn shifts(&self) -> &[f64] {
        &self.shift
    }

    pub fn bytes(&self) -> usize {
        (self.gain.len() + self.shift.len()) * std::mem::size_of::<f64>()
    }

    pub fn max_abs_diff(&self, other: &PatchCoefficients) -> f64 {
        self.gain
            .iter()
            .zip(&other.gain)
            .chain(self.shift.iter().zip(&other.shift))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Position class of a patch along one axis: how many neighbours it has
/// before and after, each capped at the reach of overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AxisClass {
    pub before: usize,
    pub after: usize,
}

fn axis_class(index: usize, count: usize, reach: usize) -> AxisClass {
    AxisClass {
        before: index.min(reach),
        after: (count - 1 - index).min(reach),
    }
}

/// Cached gain/shift tiles for an evenly spaced grid.
///
/// `W` and `S` repeat with the stride away from the borders, so every patch
/// falls into one of a few position classes per axis and all patches of a
/// class share the same coefficient maps. When the patch is at most twice
/// the stride this gives the familiar first/interior/last split (at most 9
/// classes in 2-D); deeper overlap needs more border classes.
#[derive(Clone, Debug)]
pub struct CoefficientTiles {
    grid: PatchGrid,
    reach: (usize, usize),
    tiles: BTreeMap<(AxisClass, AxisClass), PatchCoefficients>,
}

impl CoefficientTiles {
    pub fn precompute(grid: &PatchGrid, window: &WeightWindow) -> Result<Self> {
        window.ensure_fits(grid)?;
        if grid.spec().border_policy != BorderPolicy::ExactTiling || !grid.is_periodic() {
            return Err(Error::Geometry(
                "coefficient tiles need an exact-tiling grid; clamp-last borders break periodicity".into(),
            ));
        }
        let spec = grid.spec();
        let reach = (
            spec.patch_h.div_ceil(spec.stride_y) - 1,
            spec.patch_w.div_ceil(spec.stride_x) - 1,
        );
        let (nr, nc) = (grid.row_origins().len(), grid.col_origins().len());
        let mut tiles = BTreeMap::new();
        for ri in 0..nr {
            let rc = axis_class(ri, nr, reach.0);
            for ci in 0..nc {
                let cc = axis_class(ci, nc, reach.1);
                tiles
                    .entry((rc, cc))
                    .or_insert_with(|| PatchCoefficients::local(grid, window, grid.index_of(ri, ci)));
            }
        }
        Ok(Self {
            grid: grid.clone(),
            reach,
            tiles,
        })
    }

    pub fn class_of(&self, k: usize) -> (AxisClass, AxisClass) {
        let (ri, ci) = self.grid.grid_position(k);
        (
            axis_class(ri, self.grid.row_origins().len(), self.reach.0),
            axis_class(ci, self.grid.col_origins().len(), self.reach.1),
        )
    }

    /// Coefficients for patch `k` of `grid`; fails if the tiles were built for another grid.
    pub fn for_patch(&self, grid: &PatchGrid, k: usize) -> Result<&PatchCoefficients> {
        if grid != &self.grid {
            return Err(Error::Geometry("coefficient tiles were built for a different grid".into()));
        }
        if k >= grid.len() {
            return Err(Error::Geometry(format!("patch index {k} out of range ({} patches)", grid.len())));
        }
        Ok(&self.tiles[&self.class_of(k)])
    }

    pub fn class_count(&self) -> usize {
        self.tiles.len()
    }

    pub fn interior(&self) -> Option<&PatchCoefficients> {
        let interior = AxisClass {
            before: self.reach.0,
            after: self.reach.0,
        };
        let interior_c = AxisClass {
            before: self.reach.1,
            after: self.reach.1,
        };
        self.tiles.get(&(interior, interior_c))
    }

    pub fn period(&self) -> (usize, usize) {
        (self.grid.spec().stride_y, self.grid.spec().stride_x)
    }

    pub fn bytes(&self) -> usize {
        self.tiles.values().map(PatchCoefficients::bytes).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CanvasSpec, WindowSpec};

    fn grid(h: usize, w: usize, patch: usize, stride: usize, policy: BorderPolicy) -> PatchGrid {
        PatchGrid::build(CanvasSpec::new(h, w, 1).unwrap(), patch, patch, stride, stride, policy).unwrap()
    }

    #[test]
    fn single_patch_constant() {
        let g = grid(8, 8, 8, 4, BorderPolicy::ExactTiling);
        let f = NormalizationField::compute(&g, &WeightWindow::constant(8, 8)).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!((f.w(y, x), f.s(y, x), f.lambda(y, x)), (1.0, 1.0, 1.0));
            }
        }
    }

    #[test]
    fn two_patch_overlap() {
        let g = PatchGrid::build(CanvasSpec::new(4, 6, 1).unwrap(), 4, 4, 2, 2, BorderPolicy::ExactTiling).unwrap();
        assert_eq!(g.len(), 2);
        let f = NormalizationField::compute(&g, &WeightWindow::constant(4, 4)).unwrap();
        assert_eq!(f.w(1, 2), 2.0);
        assert!((f.s(1, 2) - 2f64.sqrt()).abs() < 1e-15);
        assert!((f.lambda(1, 2) - 0.5).abs() < 1e-15);
        assert!((f.lambda(1, 3) - 0.5).abs() < 1e-15);
        assert_eq!((f.w(0, 0), f.s(0, 0)), (1.0, 1.0));
        assert_eq!((f.w(3, 5), f.s(3, 5)), (1.0, 1.0));
    }

    #[test]
    fn single_patch_gaussian_is_window() {
        let g = grid(16, 16, 16, 8, BorderPolicy::ExactTiling);
        let win = WeightWindow::gaussian(16, 16, 4.0).unwrap();
        let f = NormalizationField::compute(&g, &win).unwrap();
        assert_eq!(f.w(8, 8), 1.0);
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(f.w(y, x), win.at(y, x));
            }
        }
    }

    #[test]
    fn erosion_examples() {
        assert_eq!(erosion_from_weights(&[1.0]), 1.0);
        assert_eq!(erosion_from_weights(&[1.0, 1.0]), 0.5);
        assert!((erosion_from_weights(&[1.0, 2.0]) - 5.0 / 9.0).abs() < 1e-15);
        let g = grid(8, 8, 8, 4, BorderPolicy::ExactTiling);
        let f = NormalizationField::compute(&g, &WeightWindow::constant(8, 8)).unwrap();
        assert!(f.erosion_factor(8, 0).is_err());
    }

    #[test]
    fn double_cover_coefficients() {
        let g = PatchGrid::build(CanvasSpec::new(4, 6, 1).unwrap(), 4, 4, 2, 2, BorderPolicy::ExactTiling).unwrap();
        let win = WeightWindow::constant(4, 4);
        let tiles = CoefficientTiles::precompute(&g, &win).unwrap();
        let c = tiles.for_patch(&g, 0).unwrap();
        assert_eq!((c.gain(0, 0), c.shift(0, 0)), (1.0, 0.0));
        let r2 = 2f64.sqrt();
        assert!((c.gain(0, 2) - 1.0 / r2).abs() < 1e-15);
        assert!((c.shift(0, 2) - (0.5 - 1.0 / r2)).abs() < 1e-15);
        assert!((c.shift(0, 2) - (-0.20710678118654752)).abs() < 1e-12);
    }

    #[test]
    fn tiles_match_global_field_everywhere() {
        for (patch, stride, n) in [(8, 4, 5), (10, 4, 6), (12, 3, 7), (6, 6, 3)] {
            let len = patch + stride * (n - 1);
            let g = grid(len, len + stride, patch, stride, BorderPolicy::ExactTiling);
            for spec in [WindowSpec::Constant, WindowSpec::Gaussian { sigma: None }, WindowSpec::LinearRamp] {
                let win = spec.build(patch, patch).unwrap();
                let field = NormalizationField::compute(&g, &win).unwrap();
                let tiles = CoefficientTiles::precompute(&g, &win).unwrap();
                for k in 0..g.len() {
                    let direct = field.patch_coefficients(&g, &win, k);
                    let cached = tiles.for_patch(&g, k).unwrap();
                    assert!(direct.max_abs_diff(cached) <= 1e-12, "patch {k} of {patch}/{stride}");
                }
                if patch <= 2 * stride {
                    assert!(tiles.class_count() <= 9);
                }
            }
        }
    }

    #[test]
    fn rejects_clamp_last_and_foreign_grid() {
        let g = grid(20, 20, 8, 4, BorderPolicy::ClampLast);
        assert!(CoefficientTiles::precompute(&g, &WeightWindow::constant(8, 8)).is_err());
        let a = grid(20, 20, 8, 4, BorderPolicy::ExactTiling);
        let b = grid(24, 24, 8, 4, BorderPolicy::ExactTiling);
        let tiles = CoefficientTiles::precompute(&a, &WeightWindow::constant(8, 8)).unwrap();
        assert!(tiles.for_patch(&b, 0).is_err());
    }

    #[test]
    fn local_matches_field_on_clamped_grid() {
        let g = PatchGrid::build(CanvasSpec::new(37, 29, 1).unwrap(), 12, 9, 5, 4, BorderPolicy::ClampLast).unwrap();
        let win = WeightWindow::gaussian(12, 9, 3.0).unwrap();
        let field = NormalizationField::compute(&g, &win).unwrap();
        for k in 0..g.len() {
            let a = field.patch_coefficients(&g, &win, k);
            let b = PatchCoefficients::local(&g, &win, k);
            assert!(a.max_abs_diff(&b) <= 1e-12);
        }
    }

    #[test]
    fn field_invariants() {
        let g = PatchGrid::build(CanvasSpec::new(40, 33, 1).unwrap(), 16, 16, 6, 5, BorderPolicy::ClampLast).unwrap();
        let win = WeightWindow::linear_ramp(16, 16);
        let f = NormalizationField::compute(&g, &win).unwrap();
        for y in 0..40 {
            for x in 0..33 {
                let (w, s) = (f.w(y, x), f.s(y, x));
                assert!(w > 0.0 && s > 0.0 && s <= w + 1e-12);
                let single = g.coverage_at(y, x).unwrap().len() == 1;
                assert_eq!(single, (s - w).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn coefficients_sum_to_one_and_shift_nonpositive() {
        let g = PatchGrid::build(CanvasSpec::new(30, 30, 1).unwrap(), 10, 10, 4, 3, BorderPolicy::ClampLast).unwrap();
        let win = WeightWindow::gaussian(10, 10, 2.5).unwrap();
        let mut total = vec![0.0; 900];
        for k in 0..g.len() {
            let c = PatchCoefficients::local(&g, &win, k);
            let (r, col) = g.origin(k);
            for i in 0..10 {
                for j in 0..10 {
                    assert!(c.shift(i, j) <= 0.0);
                    total[(r + i) * 30 + col + j] += c.gain(i, j) + c.shift(i, j);
                }
            }
        }
        assert!(total.iter().all(|t| (t - 1.0).abs() < 1e-12));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cauchy_schwarz(weights in proptest::collection::vec(1e-6f64..10.0, 1..12)) {
                let l = erosion_from_weights(&weights);
                prop_assert!(l > 0.0 && l <= 1.0 + 1e-15);
                if weights.len() == 1 {
                    prop_assert!((l - 1.0).abs() < 1e-15);
                } else {
                    prop_assert!(l < 1.0);
                }
            }
        }
    }
}
