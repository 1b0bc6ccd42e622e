//! Tiled diffusion super-resolution sampling.
//!
//! Overlapping patches of a large canvas are denoised independently and
//! fused every reverse step. Plain weighted averaging of the per-patch noise
//! shrinks its variance by `lambda = sum w^2 / (sum w)^2`; the corrected
//! projection rescales the fused residual around the deterministic mean to
//! undo that. The same correction factors into per-patch affine operators
//! (`gain * y + shift * D`) whose plain sum reproduces the global result, which
//! lets [`mda`] stream patches through an out-of-core tile store with a
//! working set that does not grow with the canvas.
//!
//! - [`reference`]: in-core sampler (independent, naive and corrected fusion).
//! - [`mda`]: streaming sampler over a [`mda::TileStore`].
//! - [`stitch`]: Gaussian-weighted blending of per-patch probability maps.
//! - [`metrics`]: RMSE/PSNR/SSIM, segmentation scores, seam index, FID crops.
//! - [`pipeline`]: configuration-driven end-to-end runs behind the `tilefuse` binary.

pub mod cli;
pub mod config;
pub mod degrade;
pub mod denoiser;
pub mod error;
pub mod field;
pub mod geometry;
pub mod mda;
pub mod metrics;
pub mod noise;
pub mod pipeline;
pub mod raster;
pub mod reference;
pub mod scene;
pub mod schedule;
pub mod stitch;
pub mod verify;

pub use error::{Error, Result};
pub use field::{CoefficientTiles, NormalizationField, PatchCoefficients};
pub use geometry::{BorderPolicy, CanvasSpec, GridSpec, PatchGrid, WeightWindow, WindowSpec};
pub use noise::NoiseSource;
pub use raster::{Dtype, Raster, Shape};
pub use schedule::{NoiseSchedule, ScheduleSpec};
