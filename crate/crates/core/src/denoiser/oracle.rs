use std::collections::HashMap;

use super::{DenoiseRequest, DenoiseResponse, Denoiser};
use crate::error::{Error, Result};
use crate::geometry::PatchGrid;
use crate::raster::{Raster, Shape};

/// Always predicts zero noise.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn denoise(&self, req: &DenoiseRequest) -> Result<DenoiseResponse> {
        Ok(DenoiseResponse {
            epsilon: Raster::zeros(req.latent.shape()),
        })
    }
}

/// Inverts the forward marginal `y_t = sqrt(g) y_0 + sqrt(1 - g) eps` against
/// registered ground truth, keyed by patch origin.
#[derive(Clone, Debug, Default)]
pub struct ExactNoiseOracle {
    truth: HashMap<(usize, usize), Raster>,
}

impl ExactNoiseOracle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register the ground-truth crop of every patch in `grid` from a latent-range canvas.
    pub fn from_canvas(truth: &Raster, grid: &PatchGrid) -> Result<Self> {
        let expected = grid.canvas().shape();
        if truth.shape() != expected {
            return Err(Error::shape(expected, truth.shape()));
        }
        let mut oracle = Self::new();
        for (r, c) in grid.origins() {
            oracle.register((r, c), truth.crop(r, c, grid.patch_h(), grid.patch_w())?);
        }
        Ok(oracle)
    }

    pub fn register(&mut self, origin: (usize, usize), patch: Raster) {
        self.truth.insert(origin, patch);
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }
}

impl Denoiser for ExactNoiseOracle {
    fn denoise(&self, req: &DenoiseRequest) -> Result<DenoiseResponse> {
        let y0 = self.truth.get(&req.origin).ok_or_else(|| {
            Error::Invalid(format!("no ground truth registered for patch origin {:?}", req.origin))
        })?;
        req.latent.ensure_same_shape(y0)?;
        let sg = req.gamma.sqrt();
        let sn = (1.0 - req.gamma).sqrt();
        let data = req
            .latent
            .data()
            .iter()
            .zip(y0.data())
            .map(|(yt, y0)| (yt - sg * y0) / sn)
            .collect();
        Ok(DenoiseResponse {
            epsilon: Raster::from_vec(req.latent.shape(), data)?,
        })
    }
}

/// Bayes-optimal noise prediction under a Gaussian prior centred on the
/// condition: per channel, `y_0 ~ N(x, texture^2 I + offset^2 1 1^T)` over
/// the patch. The rank-one `offset` term models patch-level brightness
/// uncertainty, so patches sampled in isolation drift apart.
///
/// `eps_hat = sqrt(1 - g) A^{-1} (y_t - sqrt(g) x)` with
/// `A = (g texture^2 + 1 - g) I + g offset^2 1 1^T`, inverted in closed form.
#[derive(Clone, Copy, Debug)]
pub struct PriorDenoiser {
    pub texture_std: f64,
    pub offset_std: f64,
}

impl PriorDenoiser {
    pub fn new(texture_std: f64, offset_std: f64) -> Self {
        Self {
            texture_std,
            offset_std,
        }
    }
}

impl Denoiser for PriorDenoiser {
    fn denoise(&self, req: &DenoiseRequest) -> Result<DenoiseResponse> {
        let shape: Shape = req.latent.shape();
        let g = req.gamma;
        let sg = g.sqrt();
        let a = g * self.texture_std * self.texture_std + 1.0 - g;
        let b = g * self.offset_std * self.offset_std;
        let n = (shape.height * shape.width) as f64;
        let channels = shape.channels;
        let resid: Vec<f64> = req
            .latent
            .data()
            .iter()
            .zip(req.condition.data())
            .map(|(y, x)| y - sg * x)
            .collect();
        let mut sums = vec![0.0; channels];
        for (i, r) in resid.iter().enumerate() {
            sums[i % channels] += r;
        }
        let coupling = b / (a + n * b);
        let scale = (1.0 - g).sqrt() / a;
        let data = resid
            .iter()
            .enumerate()
            .map(|(i, r)| scale * (r - coupling * sums[i % channels]))
            .collect();
        Ok(DenoiseResponse {
            epsilon: Raster::from_vec(shape, data)?,
        })
    }
}
