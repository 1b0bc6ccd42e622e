//! End-to-end run: load, degrade, sample in the configured mode, write outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::config::{RunConfig, RunMode};
use crate::degrade::degrade;
use crate::error::{Error, Result};
use crate::geometry::{BorderPolicy, CanvasSpec, GridSpec, PatchGrid};
use crate::mda::{run_streaming_chain, MemoryReport, StreamSetup};
use crate::metrics::{rmse_psnr, seam_index, Fidelity, MAX_8BIT};
use crate::noise::NoiseSource;
use crate::raster::{latent_to_pixels, load_png, pixels_to_latent, save_png, write_grid, Dtype, Raster};
use crate::reference::{run_reference_chain, ChainSetup, FusionMode};
use crate::scene::{toy_scene, TOY_SIZE};

/// Inputs shared by every mode.
pub struct Prepared {
    /// High-resolution pixels, 0..=255.
    pub hr: Raster,
    /// Ground truth in latent range.
    pub truth: Raster,
    /// Bicubic re-upsampled LR in latent range.
    pub condition: Raster,
    pub canvas: CanvasSpec,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let hr = match &cfg.input {
        Some(p) => load_png(p)?,
        None => toy_scene(TOY_SIZE),
    };
    let canvas = CanvasSpec::new(hr.height(), hr.width(), hr.channels())?;
    let degraded = degrade(&hr, cfg.factor)?;
    Ok(Prepared {
        truth: pixels_to_latent(&hr),
        condition: pixels_to_latent(&degraded.condition),
        hr,
        canvas,
    })
}

/// Non-overlapping grid with the configured patch size; seams are measured
/// along its boundaries so every mode is scored on the same lines.
pub fn seam_grid(cfg: &RunConfig, canvas: CanvasSpec) -> Result<PatchGrid> {
    PatchGrid::new(
        canvas,
        GridSpec {
            patch_h: cfg.patch_h,
            patch_w: cfg.patch_w,
            stride_y: cfg.patch_h,
            stride_x: cfg.patch_w,
            border_policy: BorderPolicy::ClampLast,
        },
    )
}

#[derive(Debug)]
pub struct RunOutput {
    /// Final latent, unclamped.
    pub latent: Raster,
    /// Output pixels, 0..=255 (unrounded).
    pub pixels: Raster,
    pub fidelity: Fidelity,
    pub seam_index: f64,
    pub memory: Option<MemoryReport>,
    pub patches: usize,
    pub files: Vec<PathBuf>,
}

/// Sample the final latent for `cfg` given prepared inputs, without writing outputs.
pub fn sample(cfg: &RunConfig, prep: &Prepared) -> Result<(Raster, usize, Option<MemoryReport>)> {
    let grid = cfg.effective_grid(prep.canvas)?;
    let window = cfg.window()?;
    let schedule = cfg.schedule()?;
    let denoiser = cfg.build_denoiser(&grid, &prep.truth)?;
    let noise = NoiseSource::new(cfg.seed);
    let n = grid.len();
    if cfg.mode == RunMode::Mda {
        let setup = StreamSetup {
            grid: &grid,
            window: &window,
            schedule: &schedule,
            denoiser: denoiser.as_ref(),
            noise,
            condition: &prep.condition,
        };
        let out = run_streaming_chain(&setup, &cfg.stream_config())?;
        return Ok((out.canvas()?, n, Some(out.memory)));
    }
    let mode = match cfg.mode {
        RunMode::Independent => FusionMode::Independent,
        RunMode::Naive => FusionMode::Naive,
        _ => FusionMode::Corrected,
    };
    let setup = ChainSetup {
        grid: &grid,
        window: &window,
        schedule: &schedule,
        denoiser: denoiser.as_ref(),
        noise,
        condition: &prep.condition,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let latent = pool.install(|| run_reference_chain(&setup, mode, None))?;
    Ok((latent, n, None))
}

fn sibling(output: &Path, suffix: &str) -> PathBuf {
    let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    output.with_file_name(format!("{stem}{suffix}"))
}

/// Run `cfg` end to end. Writes the output PNG, the final latent as a flat
/// f32 grid (`<stem>_latent.bin/.toml`) and the resolved configuration
/// (`<stem>.run.toml`).
pub fn execute(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    let (latent, patches, memory) = sample(cfg, &prep)?;
    let pixels = latent_to_pixels(&latent);
    let fidelity = rmse_psnr(&prep.hr, &pixels, MAX_8BIT)?;
    let seam = seam_index(&pixels, &seam_grid(cfg, prep.canvas)?)?;

    let mut files = Vec::new();
    save_png(&cfg.output, &pixels)?;
    files.push(cfg.output.clone());
    let latent_base = sibling(&cfg.output, "_latent");
    let mut meta = BTreeMap::new();
    meta.insert("mode".into(), cfg.mode.to_string());
    meta.insert("seed".into(), cfg.seed.to_string());
    write_grid(&latent_base, &latent, Dtype::F32, meta)?;
    files.push(latent_base.with_extension("bin"));
    let manifest = sibling(&cfg.output, ".run.toml");
    std::fs::write(&manifest, cfg.to_toml())?;
    files.push(manifest);

    Ok(RunOutput {
        latent,
        pixels,
        fidelity,
        seam_index: seam,
        memory,
        patches,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DenoiserSpec;

    fn cfg(dir: &Path, mode: RunMode) -> RunConfig {
        RunConfig {
            mode,
            steps: 4,
            beta_start: 1e-3,
            beta_end: 0.2,
            denoiser: DenoiserSpec::Prior {
                texture_std: 0.3,
                offset_std: 0.3,
            },
            store: dir.join("store"),
            output: dir.join(format!("{mode}.png")),
            ..RunConfig::default()
        }
    }

    #[test]
    fn corrected_and_mda_agree_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(dir.path(), RunMode::Corrected);
        let a = execute(&c).unwrap();
        c.mode = RunMode::Mda;
        c.dtype = Dtype::F64;
        c.output = dir.path().join("mda.png");
        let b = execute(&c).unwrap();
        assert!(a.latent.max_abs_diff(&b.latent).unwrap() < 1e-10);
        assert!(b.memory.is_some());
        assert_eq!(b.patches, 25);
        for f in &b.files {
            assert!(f.exists(), "{}", f.display());
        }
        let back = RunConfig::load(&dir.path().join("mda.run.toml")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn exact_oracle_recovers_truth_in_every_mode() {
        let dir = tempfile::tempdir().unwrap();
        for mode in [RunMode::Independent, RunMode::Naive, RunMode::Corrected, RunMode::Mda] {
            let mut c = cfg(dir.path(), mode);
            c.denoiser = DenoiserSpec::Exact;
            c.dtype = Dtype::F64;
            let out = execute(&c).unwrap();
            assert!(out.fidelity.rmse < 1e-6, "{mode}: {}", out.fidelity.rmse);
        }
    }
}
