//! Streaming sampler built on per-patch affine operators.
//!
//! Each patch contributes `Psi_k = gain_k * y_{t-1}^(k) + shift_k * D^(k)`
//! to the next canvas. Summed over the patches covering a pixel this equals
//! the corrected projection, so the fused canvas can be accumulated one patch
//! at a time into an out-of-core [`TileStore`] with no normalization pass.

mod engine;
mod memory;
mod store;

pub use engine::{
    accumulate_step, patch_order, run_streaming_chain, CoefficientSource, ConditionSource, PatchOrder,
    StreamConfig, StreamOutcome, StreamSetup,
};
pub use memory::{BufferClass, Lease, MemoryAccounting, MemoryReport};
pub use store::{merge_partials, StoreManifest, StoreOptions, TileKey, TileStore};

use crate::error::{Error, Result};
use crate::field::{CoefficientTiles, PatchCoefficients};
use crate::geometry::PatchGrid;
use crate::raster::Raster;

/// One patch's contribution to the next fused canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiContribution {
    pub patch: usize,
    pub origin: (usize, usize),
    pub values: Raster,
}

/// `gain * y_prev + shift * d`, elementwise over the patch and broadcast over channels.
pub fn psi_apply(y_prev: &Raster, deterministic: &Raster, coeffs: &PatchCoefficients) -> Result<Raster> {
    y_prev.ensure_same_shape(deterministic)?;
    if (y_prev.height(), y_prev.width()) != (coeffs.height(), coeffs.width()) {
        return Err(Error::shape(
            format!("{}x{} patch", coeffs.height(), coeffs.width()),
            y_prev.shape(),
        ));
    }
    let ch = y_prev.channels();
    let mut out = Raster::zeros(y_prev.shape());
    let (g, s) = (coeffs.gains(), coeffs.shifts());
    let (y, d) = (y_prev.data(), deterministic.data());
    for (p, (gain, shift)) in g.iter().zip(s).enumerate() {
        for c in 0..ch {
            let i = p * ch + c;
            out.data_mut()[i] = gain * y[i] + shift * d[i];
        }
    }
    Ok(out)
}

/// [`psi_apply`] with coefficients looked up from cached tiles for patch `k`.
pub fn psi_apply_tiled(
    y_prev: &Raster,
    deterministic: &Raster,
    tiles: &CoefficientTiles,
    grid: &PatchGrid,
    k: usize,
) -> Result<PsiContribution> {
    let coeffs = tiles.for_patch(grid, k)?;
    let values = psi_apply(y_prev, deterministic, coeffs)?;
    if !values.is_finite() {
        return Err(Error::Invalid(format!("non-finite contribution from patch {k}")));
    }
    Ok(PsiContribution {
        patch: k,
        origin: grid.origin(k),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BorderPolicy, CanvasSpec, GridSpec, WeightWindow};
    use crate::raster::Shape;

    fn coeffs(gain: f64, shift: f64) -> PatchCoefficients {
        PatchCoefficients::from_fn(1, 1, |_, _| {
            // solve gain = w/S, shift = w(1/W - 1/S) with w = 1
            let s = 1.0 / gain;
            let w = 1.0 / (shift + gain);
            (1.0, w, s)
        })
    }

    #[test]
    fn single_cover_is_identity() {
        let y = Raster::filled(Shape::new(1, 1, 3), 0.37);
        let d = Raster::filled(Shape::new(1, 1, 3), -2.0);
        let out = psi_apply(&y, &d, &coeffs(1.0, 0.0)).unwrap();
        assert_eq!(out, y);
    }

    #[test]
    fn double_cover_unit_weights() {
        // W = 2, S = sqrt 2
        let c = PatchCoefficients::from_fn(1, 1, |_, _| (1.0, 2.0, 2f64.sqrt()));
        let one = Raster::filled(Shape::new(1, 1, 1), 1.0);
        let out = psi_apply(&one, &one, &c).unwrap();
        let expected = 1.0 / 2f64.sqrt() + (0.5 - 1.0 / 2f64.sqrt());
        assert!((out.get(0, 0, 0) - expected).abs() < 1e-15);
        assert!((out.get(0, 0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn noiseless_contributions_sum_to_weighted_mean() {
        let canvas = CanvasSpec::new(24, 24, 1).unwrap();
        let grid = PatchGrid::new(canvas, GridSpec::square(8, 4, BorderPolicy::ExactTiling)).unwrap();
        let window = WeightWindow::gaussian(8, 8, 2.5).unwrap();
        let tiles = CoefficientTiles::precompute(&grid, &window).unwrap();
        let mut sum = Raster::zeros(canvas.shape());
        for k in 0..grid.len() {
            let (r, c) = grid.origin(k);
            let d = Raster::from_fn(grid.patch_shape(), |i, j, _| ((r + i) * 31 + (c + j) * 7) as f64 * 0.01);
            let psi = psi_apply_tiled(&d, &d, &tiles, &grid, k).unwrap();
            for i in 0..8 {
                for j in 0..8 {
                    let v = sum.get(r + i, c + j, 0) + psi.values.get(i, j, 0);
                    sum.set(r + i, c + j, 0, v);
                }
            }
        }
        for y in 0..24 {
            for x in 0..24 {
                let truth = (y * 31 + x * 7) as f64 * 0.01;
                assert!((sum.get(y, x, 0) - truth).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let y = Raster::zeros(Shape::new(2, 2, 1));
        assert!(psi_apply(&y, &y, &coeffs(1.0, 0.0)).is_err());
    }
}
