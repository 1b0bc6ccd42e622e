//! Self-check suites: streaming/reference equivalence, variance erosion and
//! its correction, coefficient periodicity, and the working-set bound.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{PriorDenoiser, ZeroDenoiser};
use crate::error::{Error, Result};
use crate::field::{CoefficientTiles, NormalizationField};
use crate::geometry::{BorderPolicy, CanvasSpec, GridSpec, PatchGrid, WeightWindow};
use crate::mda::{run_streaming_chain, StoreOptions, StreamConfig, StreamSetup};
use crate::noise::NoiseSource;
use crate::raster::{Dtype, Raster, Shape};
use crate::reference::{corrected_project, naive_fuse, run_reference_chain, weighted_fuse, ChainSetup, FusionMode};
use crate::schedule::NoiseSchedule;

pub const TOL_F64: f64 = 1e-10;
pub const TOL_F32: f64 = 1e-4;
pub const TOL_PERIODIC: f64 = 1e-12;
pub const MEMORY_SPREAD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub lines: Vec<String>,
    pub passed: bool,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "suite: {}", self.name)?;
        for l in &self.lines {
            writeln!(f, "{l}")?;
        }
        writeln!(f, "result: {}", if self.passed { "pass" } else { "fail" })
    }
}

/// One randomized small instance for the equivalence check.
#[derive(Clone, Debug)]
pub struct EquivalenceCase {
    pub grid: PatchGrid,
    pub window: WeightWindow,
    pub seed: u64,
}

impl EquivalenceCase {
    pub fn random(rng: &mut impl Rng) -> Result<Self> {
        let patch = [16, 32][rng.random_range(0..2)];
        let stride = [8, 16][rng.random_range(0..2)];
        let policy = if rng.random_bool(0.5) {
            BorderPolicy::ExactTiling
        } else {
            BorderPolicy::ClampLast
        };
        let side = |rng: &mut dyn rand::RngCore| -> usize {
            match policy {
                BorderPolicy::ExactTiling => {
                    let max_steps = (128 - patch) / stride;
                    patch + stride * rng.random_range(0..=max_steps)
                }
                BorderPolicy::ClampLast => rng.random_range(patch..=128),
            }
        };
        let (h, w) = (side(rng), side(rng));
        let channels = rng.random_range(1..=3);
        let canvas = CanvasSpec::new(h, w, channels)?;
        let grid = PatchGrid::new(canvas, GridSpec::square(patch, stride, policy))?;
        let window = if rng.random_bool(0.5) {
            WeightWindow::constant(patch, patch)
        } else {
            WeightWindow::gaussian(patch, patch, rng.random_range(patch as f64 / 8.0..patch as f64 / 2.0))?
        };
        Ok(Self {
            grid,
            window,
            seed: rng.random(),
        })
    }

    fn condition(&self) -> Raster {
        let s = NoiseSource::new(self.seed ^ 0xC0DE);
        s.initial_window(0, 0, self.grid.canvas().shape()).map(|v| (0.5 * v).tanh())
    }

    /// Max-abs difference between the in-core corrected chain and the
    /// streaming chain stored at `dtype`, over a `steps`-step schedule.
    pub fn max_diff(&self, steps: usize, dtype: Dtype, store_dir: &Path) -> Result<f64> {
        let schedule = NoiseSchedule::linear(steps, 1e-3, 0.2)?;
        let condition = self.condition();
        let denoiser = PriorDenoiser::new(0.4, 0.3);
        let noise = NoiseSource::new(self.seed);
        let reference = run_reference_chain(
            &ChainSetup {
                grid: &self.grid,
                window: &self.window,
                schedule: &schedule,
                denoiser: &denoiser,
                noise,
                condition: &condition,
            },
            FusionMode::Corrected,
            None,
        )?;
        let mut cfg = StreamConfig::new(store_dir);
        cfg.store = StoreOptions {
            tile_size: 64,
            dtype,
            cache_tiles: 4,
        };
        let out = run_streaming_chain(
            &StreamSetup {
                grid: &self.grid,
                window: &self.window,
                schedule: &schedule,
                denoiser: &denoiser,
                noise,
                condition: &condition,
            },
            &cfg,
        )?;
        out.canvas()?.max_abs_diff(&reference)
    }
}

/// Reference corrected chain vs streaming chain over `cases` random instances.
pub fn equivalence_suite(seed: u64, cases: usize, steps: usize, scratch: &Path) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    for i in 0..cases {
        let case = EquivalenceCase::random(&mut rng)?;
        let dir = scratch.join(format!("case{i}"));
        worst64 = worst64.max(case.max_diff(steps, Dtype::F64, &dir)?);
        worst32 = worst32.max(case.max_diff(steps, Dtype::F32, &dir)?);
        std::fs::remove_dir_all(&dir)?;
    }
    Ok(SuiteReport {
        name: "equivalence",
        lines: vec![
            format!("cases: {cases}"),
            format!("steps: {steps}"),
            format!("max_abs_diff_f64: {worst64:e} (tolerance {TOL_F64:e})"),
            format!("max_abs_diff_f32: {worst32:e} (tolerance {TOL_F32:e})"),
        ],
        passed: worst64 <= TOL_F64 && worst32 <= TOL_F32,
    })
}

/// Empirical variance at one pixel, with its standard error under normality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceEstimate {
    pub pixel: (usize, usize),
    pub cover: usize,
    pub variance: f64,
    pub expected: f64,
    pub standard_error: f64,
}

impl VarianceEstimate {
    pub fn within(&self, k: f64) -> bool {
        (self.variance - self.expected).abs() <= k * self.standard_error
    }
}

#[derive(Clone, Debug)]
pub struct VarianceStudy {
    pub naive: Vec<VarianceEstimate>,
    pub corrected: Vec<VarianceEstimate>,
}

/// Monte-Carlo study on a 64x64 canvas with 32/16 constant-window patches:
/// every patch carries the same fixed `D` plus `sigma z_k`; the fused
/// variance is estimated at a 1-, 2- and 4-cover pixel.
pub fn variance_study(seed: u64, draws: usize, sigma: f64) -> Result<VarianceStudy> {
    if draws < 2 {
        return Err(Error::Invalid("variance study needs at least two draws".into()));
    }
    let canvas = CanvasSpec::new(64, 64, 1)?;
    let grid = PatchGrid::new(canvas, GridSpec::square(32, 16, BorderPolicy::ExactTiling))?;
    let window = WeightWindow::constant(32, 32);
    let field = NormalizationField::compute(&grid, &window)?;
    let lambda = field.lambda_raster();
    let d_fixed: Vec<Raster> = (0..grid.len())
        .map(|k| {
            let (r, c) = grid.origin(k);
            Raster::from_fn(grid.patch_shape(), |i, j, _| ((r + i) as f64 * 0.01 - (c + j) as f64 * 0.02).sin())
        })
        .collect();
    let pixels = [(0, 0), (0, 24), (24, 24)];
    let noise = NoiseSource::new(seed);
    let mut sums = vec![[0.0f64; 4]; pixels.len()];
    for draw in 0..draws {
        let outputs: Vec<Raster> = d_fixed
            .iter()
            .enumerate()
            .map(|(k, d)| {
                let z = noise.patch_noise(k, draw + 1, d.shape());
                Raster::from_vec(
                    d.shape(),
                    d.data().iter().zip(z.data()).map(|(d, z)| d + sigma * z).collect(),
                )
                .expect("same shape")
            })
            .collect();
        let fused = naive_fuse(&outputs, &grid, &window, &field)?;
        let mean = weighted_fuse(&d_fixed, &grid, &window, &field)?;
        let corrected = corrected_project(&fused, &mean, &lambda)?;
        for (i, &(y, x)) in pixels.iter().enumerate() {
            let a = fused.get(y, x, 0) - mean.get(y, x, 0);
            let b = corrected.get(y, x, 0) - mean.get(y, x, 0);
            sums[i][0] += a;
            sums[i][1] += a * a;
            sums[i][2] += b;
            sums[i][3] += b * b;
        }
    }
    let n = draws as f64;
    let target = sigma * sigma;
    let estimate = |s: f64, ss: f64, expected: f64, pixel: (usize, usize)| {
        let var = (ss - s * s / n) / (n - 1.0);
        VarianceEstimate {
            pixel,
            cover: grid.coverage_at(pixel.0, pixel.1).map(|v| v.len()).unwrap_or(0),
            variance: var,
            expected,
            standard_error: expected * (2.0 / (n - 1.0)).sqrt(),
        }
    };
    let naive = pixels
        .iter()
        .zip(&sums)
        .map(|(&p, s)| estimate(s[0], s[1], target * field.lambda(p.0, p.1), p))
        .collect();
    let corrected = pixels
        .iter()
        .zip(&sums)
        .map(|(&p, s)| estimate(s[2], s[3], target, p))
        .collect();
    Ok(VarianceStudy { naive, corrected })
}

pub fn variance_suite(seed: u64, draws: usize) -> Result<SuiteReport> {
    let study = variance_study(seed, draws, 0.7)?;
    let mut lines = vec![format!("draws: {draws}")];
    let mut passed = true;
    for (label, set) in [("naive", &study.naive), ("corrected", &study.corrected)] {
        for e in set {
            passed &= e.within(3.0);
            lines.push(format!(
                "{label}_cover{}_variance: {:.6} (expected {:.6}, se {:.6})",
                e.cover, e.variance, e.expected, e.standard_error
            ));
        }
    }
    Ok(SuiteReport {
        name: "variance",
        lines,
        passed,
    })
}

/// Largest difference between cached tiles and the global-field coefficients
/// over every pixel of every patch.
pub fn periodicity_error(grid: &PatchGrid, window: &WeightWindow) -> Result<f64> {
    let tiles = CoefficientTiles::precompute(grid, window)?;
    let field = NormalizationField::compute(grid, window)?;
    let mut worst = 0.0f64;
    for k in 0..grid.len() {
        let direct = field.patch_coefficients(grid, window, k);
        worst = worst.max(tiles.for_patch(grid, k)?.max_abs_diff(&direct));
    }
    Ok(worst)
}

pub fn periodicity_suite() -> Result<SuiteReport> {
    let mut lines = Vec::new();
    let mut worst = 0.0f64;
    for (size, patch, stride) in [(96, 32, 16), (128, 32, 8), (80, 16, 16), (112, 32, 12)] {
        let len = size - (size - patch) % stride;
        let canvas = CanvasSpec::new(len, len + stride, 1)?;
        let grid = PatchGrid::new(canvas, GridSpec::square(patch, stride, BorderPolicy::ExactTiling))?;
        for window in [WeightWindow::constant(patch, patch), WeightWindow::gaussian(patch, patch, patch as f64 / 4.0)?] {
            let e = periodicity_error(&grid, &window)?;
            let classes = CoefficientTiles::precompute(&grid, &window)?.class_count();
            lines.push(format!(
                "{}x{} patch {patch} stride {stride} {}: classes {classes}, max_abs_diff {e:e}",
                canvas.height,
                canvas.width,
                window.spec().kind_name()
            ));
            worst = worst.max(e);
        }
    }
    lines.push(format!("max_abs_diff: {worst:e} (tolerance {TOL_PERIODIC:e})"));
    Ok(SuiteReport {
        name: "periodicity",
        lines,
        passed: worst <= TOL_PERIODIC,
    })
}

/// Engine peak bytes for a short streaming run on a `side x side` canvas.
pub fn memory_peak(side: usize, steps: usize, scratch: &Path) -> Result<usize> {
    let canvas = CanvasSpec::new(side, side, 3)?;
    let grid = PatchGrid::new(canvas, GridSpec::square(32, 16, BorderPolicy::ExactTiling))?;
    let window = WeightWindow::gaussian(32, 32, 8.0)?;
    let schedule = NoiseSchedule::linear(steps, 1e-3, 0.2)?;
    let condition = Raster::zeros(Shape::new(side, side, 3));
    let out = run_streaming_chain(
        &StreamSetup {
            grid: &grid,
            window: &window,
            schedule: &schedule,
            denoiser: &ZeroDenoiser,
            noise: NoiseSource::new(1),
            condition: &condition,
        },
        &StreamConfig::new(scratch),
    )?;
    Ok(out.memory.peak)
}

pub fn memory_suite(sides: &[usize], scratch: &Path) -> Result<SuiteReport> {
    let mut peaks = Vec::new();
    let mut lines = Vec::new();
    for &s in sides {
        let dir = scratch.join(format!("mem{s}"));
        let p = memory_peak(s, 2, &dir)?;
        std::fs::remove_dir_all(&dir)?;
        lines.push(format!("canvas_{s}x{s}_peak_bytes: {p}"));
        peaks.push(p as f64);
    }
    let lo = peaks.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = peaks.iter().cloned().fold(0.0, f64::max);
    let spread = (hi - lo) / lo;
    lines.push(format!("relative_spread: {spread:.4} (limit {MEMORY_SPREAD})"));
    Ok(SuiteReport {
        name: "memory",
        lines,
        passed: spread < MEMORY_SPREAD,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_equivalence_run_passes() {
        let dir = tempfile::tempdir().unwrap();
        let r = equivalence_suite(7, 3, 3, dir.path()).unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn periodicity_passes() {
        let r = periodicity_suite().unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn variance_estimates_have_expected_covers() {
        let s = variance_study(1, 200, 1.0).unwrap();
        let covers: Vec<usize> = s.naive.iter().map(|e| e.cover).collect();
        assert_eq!(covers, vec![1, 2, 4]);
        assert_eq!(s.naive[2].expected, 0.25);
    }
}
