//! Run the out-of-core streaming chain and check it against the in-core
//! corrected projection. Pass a directory to keep the tile store.

use tilefuse::denoiser::PriorDenoiser;
use tilefuse::mda::{run_streaming_chain, StreamConfig, StreamSetup};
use tilefuse::reference::{run_reference_chain, ChainSetup, FusionMode};
use tilefuse::{BorderPolicy, CanvasSpec, Dtype, GridSpec, NoiseSchedule, NoiseSource, PatchGrid, Raster, WeightWindow};

fn main() -> anyhow::Result<()> {
    let tmp = tempfile::tempdir()?;
    let store_dir = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| tmp.path().join("store"));

    let canvas = CanvasSpec::new(160, 200, 3)?;
    let grid = PatchGrid::new(canvas, GridSpec::square(32, 16, BorderPolicy::ClampLast))?;
    let window = WeightWindow::gaussian(32, 32, 8.0)?;
    let schedule = NoiseSchedule::linear(20, 1e-3, 0.2)?;
    let condition = Raster::from_fn(canvas.shape(), |y, x, c| ((y as f64 / 9.0).sin() * (x as f64 / 13.0).cos()) * (1.0 - 0.2 * c as f64));
    let denoiser = PriorDenoiser::new(0.4, 0.3);
    let noise = NoiseSource::new(42);

    let mut cfg = StreamConfig::new(&store_dir);
    cfg.store.dtype = Dtype::F64;
    cfg.parallelism = 4;
    let out = run_streaming_chain(
        &StreamSetup { grid: &grid, window: &window, schedule: &schedule, denoiser: &denoiser, noise, condition: &condition },
        &cfg,
    )?;
    print!("{}", out.memory);

    let reference = run_reference_chain(
        &ChainSetup { grid: &grid, window: &window, schedule: &schedule, denoiser: &denoiser, noise, condition: &condition },
        FusionMode::Corrected,
        None,
    )?;
    println!("max |streaming - in-core| = {:e}", out.canvas()?.max_abs_diff(&reference)?);
    println!("store: {}", out.store.root().display());
    Ok(())
}
