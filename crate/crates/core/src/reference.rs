//! In-core sampler over a fully materialized canvas.
//!
//! Each reverse step denoises every patch, forms its deterministic part
//! `D = (y_t - (1 - a_t) / sqrt(1 - g_t) * eps) / sqrt(a_t)` and its ancestral
//! sample `y_{t-1} = D + sqrt(1 - a_t) z`, then fuses the patches:
//!
//! - naive: `Y = sum w y / W`
//! - corrected: `Y* = (Y - mu) / sqrt(lambda) + mu` with `mu = sum w D / W`
//!
//! This path is the correctness oracle for the streaming sampler.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;

use crate::denoiser::{DenoiseRequest, Denoiser};
use crate::error::{Error, Result};
use crate::field::NormalizationField;
use crate::geometry::{PatchGrid, WeightWindow};
use crate::noise::NoiseSource;
use crate::raster::{write_grid, Dtype, Raster, Shape};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Every patch runs its own chain; requires a non-overlapping grid.
    Independent,
    Naive,
    Corrected,
}

/// `D = (1 / sqrt(a_t)) * (y_t - (1 - a_t) / sqrt(1 - g_t) * eps_hat)`.
pub fn deterministic_component(
    latent: &Raster,
    epsilon: &Raster,
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<Raster> {
    check_timestep(schedule, t)?;
    deterministic_from_coefficients(latent, epsilon, schedule.alpha(t), schedule.gamma(t))
}

/// [`deterministic_component`] with explicit `alpha_t` and `gamma_t`.
pub fn deterministic_from_coefficients(
    latent: &Raster,
    epsilon: &Raster,
    alpha: f64,
    gamma: f64,
) -> Result<Raster> {
    latent.ensure_same_shape(epsilon)?;
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let eps_scale = (1.0 - alpha) / (1.0 - gamma).sqrt();
    let data = latent
        .data()
        .iter()
        .zip(epsilon.data())
        .map(|(y, e)| inv_sqrt_alpha * (y - eps_scale * e))
        .collect();
    Raster::from_vec(latent.shape(), data)
}

/// `y_{t-1} = D + sigma * z`; the final step (`t == 1`) injects no noise.
pub fn reverse_step(deterministic: &Raster, sigma: f64, noise: &Raster, t: usize) -> Result<Raster> {
    deterministic.ensure_same_shape(noise)?;
    if t <= 1 || sigma == 0.0 {
        return Ok(deterministic.clone());
    }
    let data = deterministic
        .data()
        .iter()
        .zip(noise.data())
        .map(|(d, z)| d + sigma * z)
        .collect();
    Raster::from_vec(deterministic.shape(), data)
}

fn check_timestep(schedule: &NoiseSchedule, t: usize) -> Result<()> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::Invalid(format!(
            "timestep {t} outside 1..={}",
            schedule.steps()
        )));
    }
    Ok(())
}

/// Per-patch parts of one reverse step.
#[derive(Clone, Debug)]
pub struct StepComponents {
    pub deterministic: Vec<Raster>,
    pub sigma: f64,
    pub noise: Vec<Raster>,
}

impl StepComponents {
    /// `y_{t-1}^(k) = D_k + sigma z_k` for every patch.
    pub fn outputs(&self) -> Result<Vec<Raster>> {
        self.deterministic
            .iter()
            .zip(&self.noise)
            .map(|(d, z)| reverse_step(d, self.sigma, z, 2))
            .collect()
    }
}

/// Weighted average of per-patch values, `sum w_k v_k / W`.
pub fn weighted_fuse(
    patches: &[Raster],
    grid: &PatchGrid,
    window: &WeightWindow,
    field: &NormalizationField,
) -> Result<Raster> {
    window.ensure_fits(grid)?;
    if patches.len() != grid.len() {
        return Err(Error::Invalid(format!(
            "{} patch outputs for a {}-patch grid",
            patches.len(),
            grid.len()
        )));
    }
    let canvas = grid.canvas();
    let mut acc = Raster::zeros(canvas.shape());
    let cs = canvas.channels;
    for (k, patch) in patches.iter().enumerate() {
        if patch.shape() != grid.patch_shape() {
            return Err(Error::shape(grid.patch_shape(), patch.shape()));
        }
        let (r, c) = grid.origin(k);
        for i in 0..grid.patch_h() {
            for j in 0..grid.patch_w() {
                let wk = window.at(i, j);
                let src = patch.pixel(i, j);
                let dst = acc.index(r + i, c + j, 0);
                for ch in 0..cs {
                    acc.data_mut()[dst + ch] += wk * src[ch];
                }
            }
        }
    }
    for y in 0..canvas.height {
        for x in 0..canvas.width {
            let w = field.w(y, x);
            let i = acc.index(y, x, 0);
            for v in &mut acc.data_mut()[i..i + cs] {
                *v /= w;
            }
        }
    }
    Ok(acc)
}

/// Naive fusion of the per-patch ancestral samples.
pub fn naive_fuse(
    outputs: &[Raster],
    grid: &PatchGrid,
    window: &WeightWindow,
    field: &NormalizationField,
) -> Result<Raster> {
    weighted_fuse(outputs, grid, window, field)
}

/// `Y* = (Y - mu) / sqrt(lambda) + mu`; `lambda` is an `H x W x 1` map.
pub fn corrected_project(fused: &Raster, mean: &Raster, lambda: &Raster) -> Result<Raster> {
    fused.ensure_same_shape(mean)?;
    let s = fused.shape();
    if lambda.shape() != Shape::new(s.height, s.width, 1) {
        return Err(Error::shape(Shape::new(s.height, s.width, 1), lambda.shape()));
    }
    let mut out = Raster::zeros(s);
    for y in 0..s.height {
        for x in 0..s.width {
            let l = lambda.get(y, x, 0);
            assert!(l > 0.0 && l <= 1.0 + 1e-12, "erosion factor {l} outside (0, 1] at ({y}, {x})");
            let inv = 1.0 / l.sqrt();
            let i = fused.index(y, x, 0);
            for ch in 0..s.channels {
                let (v, m) = (fused.data()[i + ch], mean.data()[i + ch]);
                out.data_mut()[i + ch] = (v - m) * inv + m;
            }
        }
    }
    Ok(out)
}

/// Dump the canvas every `every` steps as `step_<t>` flat grids under `dir`.
#[derive(Clone, Debug)]
pub struct SnapshotConfig {
    pub dir: PathBuf,
    pub every: usize,
}

/// Everything a sampling chain needs besides the fusion mode.
pub struct ChainSetup<'a> {
    pub grid: &'a PatchGrid,
    pub window: &'a WeightWindow,
    pub schedule: &'a NoiseSchedule,
    pub denoiser: &'a dyn Denoiser,
    pub noise: NoiseSource,
    /// Upsampled condition in latent range, canvas-sized.
    pub condition: &'a Raster,
}

impl ChainSetup<'_> {
    fn validate(&self) -> Result<()> {
        self.window.ensure_fits(self.grid)?;
        let expected = self.grid.canvas().shape();
        if self.condition.shape() != expected {
            return Err(Error::shape(expected, self.condition.shape()));
        }
        Ok(())
    }

    /// `Y_T`: one standard normal sample per global pixel and channel.
    pub fn initial_canvas(&self) -> Raster {
        self.noise.initial_window(0, 0, self.grid.canvas().shape())
    }

    fn denoise_patch(&self, k: usize, latent: Raster, t: usize) -> Result<(Raster, Raster)> {
        let (r, c) = self.grid.origin(k);
        let (h, w) = (self.grid.patch_h(), self.grid.patch_w());
        let condition = self.condition.crop(r, c, h, w)?;
        let req = DenoiseRequest::new((r, c), condition, latent, self.schedule.gamma(t))
            .map_err(|e| e.at_patch(k, t))?;
        let eps = self
            .denoiser
            .denoise(&req)
            .and_then(|resp| resp.validate(&req))
            .map_err(|e| e.at_patch(k, t))?
            .epsilon;
        let d = deterministic_component(&req.latent, &eps, self.schedule, t)?;
        Ok((d, self.noise.patch_noise(k, t, req.latent.shape())))
    }

    /// Denoise all patches cropped from `canvas` at timestep `t`.
    pub fn step_components(&self, canvas: &Raster, t: usize) -> Result<StepComponents> {
        check_timestep(self.schedule, t)?;
        let (h, w) = (self.grid.patch_h(), self.grid.patch_w());
        let parts = (0..self.grid.len())
            .into_par_iter()
            .map(|k| {
                let (r, c) = self.grid.origin(k);
                self.denoise_patch(k, canvas.crop(r, c, h, w)?, t)
            })
            .collect::<Result<Vec<_>>>()?;
        let (deterministic, mut noise): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
        if t == 1 {
            noise.iter_mut().for_each(|z| *z = Raster::zeros(z.shape()));
        }
        Ok(StepComponents {
            deterministic,
            sigma: self.schedule.sigma(t),
            noise,
        })
    }
}

/// One fused reverse step of the global chain.
pub fn fused_step(
    setup: &ChainSetup<'_>,
    field: &NormalizationField,
    lambda: &Raster,
    canvas: &Raster,
    t: usize,
    mode: FusionMode,
) -> Result<Raster> {
    let comps = setup.step_components(canvas, t)?;
    let fused = naive_fuse(&comps.outputs()?, setup.grid, setup.window, field)?;
    match mode {
        FusionMode::Naive => Ok(fused),
        FusionMode::Corrected => {
            let mean = weighted_fuse(&comps.deterministic, setup.grid, setup.window, field)?;
            corrected_project(&fused, &mean, lambda)
        }
        FusionMode::Independent => Err(Error::Invalid("independent mode has no fused step".into())),
    }
}

/// Run the full reverse chain from `T` to `0`; returns the final latent
/// canvas, unclamped (see [`crate::raster::latent_to_pixels`]).
pub fn run_reference_chain(
    setup: &ChainSetup<'_>,
    mode: FusionMode,
    snapshots: Option<&SnapshotConfig>,
) -> Result<Raster> {
    setup.validate()?;
    let steps = setup.schedule.steps();
    if mode == FusionMode::Independent {
        return run_independent(setup, snapshots);
    }
    let field = NormalizationField::compute(setup.grid, setup.window)?;
    let lambda = field.lambda_raster();
    let mut canvas = setup.initial_canvas();
    for t in (1..=steps).rev() {
        canvas = fused_step(setup, &field, &lambda, &canvas, t, mode)?;
        snapshot(snapshots, &canvas, t - 1)?;
    }
    Ok(canvas)
}

fn run_independent(setup: &ChainSetup<'_>, snapshots: Option<&SnapshotConfig>) -> Result<Raster> {
    let grid = setup.grid;
    if !grid.is_non_overlapping() {
        return Err(Error::Geometry(
            "independent mode needs a non-overlapping grid (stride equal to patch size)".into(),
        ));
    }
    let init = setup.initial_canvas();
    let (h, w) = (grid.patch_h(), grid.patch_w());
    let finals = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let (r, c) = grid.origin(k);
            let mut y = init.crop(r, c, h, w)?;
            for t in (1..=setup.schedule.steps()).rev() {
                let (d, z) = setup.denoise_patch(k, y, t)?;
                y = reverse_step(&d, setup.schedule.sigma(t), &z, t)?;
            }
            Ok(y)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut canvas = Raster::zeros(grid.canvas().shape());
    for (k, patch) in finals.iter().enumerate() {
        let (r, c) = grid.origin(k);
        canvas.paste(patch, r, c)?;
    }
    snapshot(snapshots, &canvas, 0)?;
    Ok(canvas)
}

fn snapshot(cfg: Option<&SnapshotConfig>, canvas: &Raster, t: usize) -> Result<()> {
    let Some(cfg) = cfg else { return Ok(()) };
    if cfg.every == 0 || t % cfg.every != 0 {
        return Ok(());
    }
    let mut meta = BTreeMap::new();
    meta.insert("timestep".to_string(), t.to_string());
    write_grid(&cfg.dir.join(format!("step_{t:05}")), canvas, Dtype::F64, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{ExactNoiseOracle, ZeroDenoiser};
    use crate::geometry::{BorderPolicy, CanvasSpec};

    fn scalar(v: f64) -> Raster {
        Raster::filled(Shape::new(1, 1, 1), v)
    }

    #[test]
    fn deterministic_component_examples() {
        let s = NoiseSchedule::linear(1, 0.19, 0.19).unwrap();
        let d = deterministic_component(&scalar(1.0), &scalar(0.0), &s, 1).unwrap();
        assert!((d.get(0, 0, 0) - 1.0 / 0.9).abs() < 1e-15);
        // alpha -> 1
        let s = NoiseSchedule::linear(1, 1e-12, 1e-12).unwrap();
        let d = deterministic_component(&scalar(0.7), &scalar(0.0), &s, 1).unwrap();
        assert!((d.get(0, 0, 0) - 0.7).abs() < 1e-12);
        assert!(deterministic_component(&scalar(0.7), &scalar(0.0), &s, 2).is_err());
    }

    #[test]
    fn deterministic_component_scalar_substitution() {
        // y = 1, eps = 1, alpha = 0.81, gamma = 0.5:
        // (1 / 0.9) * (1 - 0.19 / sqrt(0.5)), evaluated at 50 digits.
        let d = deterministic_from_coefficients(&scalar(1.0), &scalar(1.0), 0.81, 0.5).unwrap();
        assert!((d.get(0, 0, 0) - 0.812_554_914_610_124_4).abs() < 1e-15);
    }

    #[test]
    fn reverse_step_examples() {
        let z = scalar(2.0);
        assert_eq!(reverse_step(&scalar(0.3), 0.0, &z, 5).unwrap().get(0, 0, 0), 0.3);
        assert_eq!(reverse_step(&scalar(0.3), 0.9, &z, 1).unwrap().get(0, 0, 0), 0.3);
        assert_eq!(reverse_step(&scalar(0.0), 0.5, &z, 5).unwrap().get(0, 0, 0), 1.0);
    }

    fn two_patch_grid() -> PatchGrid {
        PatchGrid::build(CanvasSpec::new(1, 3, 1).unwrap(), 1, 2, 1, 1, BorderPolicy::ExactTiling).unwrap()
    }

    #[test]
    fn naive_fuse_examples() {
        let g = two_patch_grid();
        let win = WeightWindow::constant(1, 2);
        let f = NormalizationField::compute(&g, &win).unwrap();
        let a = Raster::from_vec(Shape::new(1, 2, 1), vec![5.0, 1.0]).unwrap();
        let b = Raster::from_vec(Shape::new(1, 2, 1), vec![3.0, 7.0]).unwrap();
        let y = naive_fuse(&[a, b], &g, &win, &f).unwrap();
        assert_eq!(y.data(), &[5.0, 2.0, 7.0]);
    }

    #[test]
    fn weighted_fuse_uneven_weights() {
        // the middle pixel of the 1x3 canvas sees weights {1, 3}
        let g = two_patch_grid();
        let win = WeightWindow::from_values(1, 2, vec![3.0, 1.0]);
        let f = NormalizationField::compute(&g, &win).unwrap();
        let a = Raster::from_vec(Shape::new(1, 2, 1), vec![9.0, 0.0]).unwrap();
        let b = Raster::from_vec(Shape::new(1, 2, 1), vec![4.0, 9.0]).unwrap();
        // middle pixel: patch 0 local col 1 (w=1, v=0), patch 1 local col 0 (w=3, v=4)
        let y = naive_fuse(&[a, b], &g, &win, &f).unwrap();
        assert_eq!(y.get(0, 1, 0), 3.0);
    }

    #[test]
    fn corrected_project_examples() {
        let shape = Shape::new(2, 2, 1);
        let y = Raster::filled(shape, 1.5);
        let mu = Raster::filled(shape, 1.0);
        let one = Raster::filled(shape, 1.0);
        assert_eq!(corrected_project(&y, &mu, &one).unwrap(), y);
        assert_eq!(corrected_project(&mu, &mu, &Raster::filled(shape, 0.3)).unwrap(), mu);
        let out = corrected_project(&y, &mu, &Raster::filled(shape, 0.25)).unwrap();
        assert!(out.data().iter().all(|v| (v - 2.0).abs() < 1e-15));
    }

    #[test]
    #[should_panic(expected = "erosion factor")]
    fn corrected_project_rejects_nonpositive_lambda() {
        let shape = Shape::new(1, 1, 1);
        let _ = corrected_project(&Raster::zeros(shape), &Raster::zeros(shape), &Raster::zeros(shape));
    }

    fn setup_parts(h: usize, w: usize, patch: usize, stride: usize) -> (PatchGrid, WeightWindow, NoiseSchedule, Raster) {
        let canvas = CanvasSpec::new(h, w, 2).unwrap();
        let grid = PatchGrid::build(canvas, patch, patch, stride, stride, BorderPolicy::ClampLast).unwrap();
        let window = WeightWindow::constant(patch, patch);
        let schedule = NoiseSchedule::linear(6, 1e-3, 0.2).unwrap();
        let cond = Raster::zeros(canvas.shape());
        (grid, window, schedule, cond)
    }

    #[test]
    fn single_patch_corrected_equals_plain_chain() {
        let (grid, window, schedule, cond) = setup_parts(8, 8, 8, 4);
        let truth = NoiseSource::new(77).initial_window(0, 0, grid.canvas().shape()).map(|v| v.tanh());
        let oracle = ExactNoiseOracle::from_canvas(&truth, &grid).unwrap();
        let setup = ChainSetup {
            grid: &grid,
            window: &window,
            schedule: &schedule,
            denoiser: &oracle,
            noise: NoiseSource::new(3),
            condition: &cond,
        };
        let fused = run_reference_chain(&setup, FusionMode::Corrected, None).unwrap();
        // plain per-patch chain
        let mut y = setup.initial_canvas();
        for t in (1..=schedule.steps()).rev() {
            let (d, z) = setup.denoise_patch(0, y, t).unwrap();
            y = reverse_step(&d, schedule.sigma(t), &z, t).unwrap();
        }
        assert!(fused.max_abs_diff(&y).unwrap() < 1e-12);
        // the exact oracle lands on the ground truth at t = 0
        assert!(fused.max_abs_diff(&truth).unwrap() < 1e-9);
    }

    #[test]
    fn constant_consensus() {
        let (grid, window, schedule, cond) = setup_parts(20, 17, 8, 3);
        let field = NormalizationField::compute(&grid, &window).unwrap();
        let c = 0.37;
        let d: Vec<Raster> = (0..grid.len()).map(|_| Raster::filled(grid.patch_shape(), c)).collect();
        let naive = naive_fuse(&d, &grid, &window, &field).unwrap();
        let corrected = corrected_project(&naive, &naive, &field.lambda_raster()).unwrap();
        assert!(naive.data().iter().all(|v| (v - c).abs() < 1e-14));
        assert!(corrected.data().iter().all(|v| (v - c).abs() < 1e-14));
        let _ = (schedule, cond);
    }

    #[test]
    fn independent_requires_non_overlap() {
        let (grid, window, schedule, cond) = setup_parts(16, 16, 8, 4);
        let setup = ChainSetup {
            grid: &grid,
            window: &window,
            schedule: &schedule,
            denoiser: &ZeroDenoiser,
            noise: NoiseSource::new(1),
            condition: &cond,
        };
        assert!(run_reference_chain(&setup, FusionMode::Independent, None).is_err());
    }

    #[test]
    fn independent_equals_fused_on_disjoint_grid() {
        let (grid, window, schedule, cond) = setup_parts(16, 24, 8, 8);
        let setup = ChainSetup {
            grid: &grid,
            window: &window,
            schedule: &schedule,
            denoiser: &ZeroDenoiser,
            noise: NoiseSource::new(1),
            condition: &cond,
        };
        let a = run_reference_chain(&setup, FusionMode::Independent, None).unwrap();
        let b = run_reference_chain(&setup, FusionMode::Corrected, None).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn denoiser_errors_carry_patch_and_timestep() {
        let (grid, window, schedule, cond) = setup_parts(16, 16, 8, 8);
        let oracle = ExactNoiseOracle::new();
        let setup = ChainSetup {
            grid: &grid,
            window: &window,
            schedule: &schedule,
            denoiser: &oracle,
            noise: NoiseSource::new(1),
            condition: &cond,
        };
        let err = run_reference_chain(&setup, FusionMode::Naive, None).unwrap_err();
        assert!(matches!(err, Error::Denoise { timestep: 6, .. }), "{err}");
    }

    #[test]
    fn snapshots_written() {
        let dir = tempfile::tempdir().unwrap();
        let (grid, window, schedule, cond) = setup_parts(8, 8, 8, 8);
        let setup = ChainSetup {
            grid: &grid,
            window: &window,
            schedule: &schedule,
            denoiser: &ZeroDenoiser,
            noise: NoiseSource::new(1),
            condition: &cond,
        };
        let snap = SnapshotConfig {
            dir: dir.path().to_path_buf(),
            every: 2,
        };
        run_reference_chain(&setup, FusionMode::Naive, Some(&snap)).unwrap();
        for t in [0, 2, 4] {
            assert!(dir.path().join(format!("step_{t:05}.bin")).exists());
        }
        assert!(!dir.path().join("step_00001.bin").exists());
    }
}
