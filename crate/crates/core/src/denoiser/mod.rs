//! Noise-prediction backends `f(x, y_t, gamma) -> eps_hat`.

mod external;
mod oracle;
pub mod protocol;

pub use external::{ExternalConfig, ExternalDenoiser};
pub use oracle::{ExactNoiseOracle, PriorDenoiser, ZeroDenoiser};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// One patch worth of denoiser input.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseRequest {
    /// Top-left corner of the patch on the global canvas. Not sent over the wire.
    pub origin: (usize, usize),
    /// Upsampled low-resolution condition, values in [-1, 1].
    pub condition: Raster,
    pub latent: Raster,
    pub gamma: f64,
}

impl DenoiseRequest {
    pub fn new(origin: (usize, usize), condition: Raster, latent: Raster, gamma: f64) -> Result<Self> {
        condition.ensure_same_shape(&latent)?;
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Invalid(format!("gamma must lie strictly inside (0, 1), got {gamma}")));
        }
        Ok(Self {
            origin,
            condition,
            latent,
            gamma,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseResponse {
    pub epsilon: Raster,
}

impl DenoiseResponse {
    /// Checks shape agreement with the request and finiteness.
    pub fn validate(self, req: &DenoiseRequest) -> Result<Self> {
        if self.epsilon.shape() != req.latent.shape() {
            return Err(Error::shape(req.latent.shape(), self.epsilon.shape()));
        }
        if !self.epsilon.is_finite() {
            return Err(Error::Protocol("denoiser returned non-finite values".into()));
        }
        Ok(self)
    }
}

pub trait Denoiser: Send + Sync {
    fn denoise(&self, req: &DenoiseRequest) -> Result<DenoiseResponse>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn denoise(&self, req: &DenoiseRequest) -> Result<DenoiseResponse> {
        (**self).denoise(req)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn denoise(&self, req: &DenoiseRequest) -> Result<DenoiseResponse> {
        (**self).denoise(req)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for std::sync::Arc<D> {
    fn denoise(&self, req: &DenoiseRequest) -> Result<DenoiseResponse> {
        (**self).denoise(req)
    }
}
