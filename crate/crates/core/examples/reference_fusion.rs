//! In-core sampling chain in each fusion mode on the bundled toy scene, with
//! the analytic prior denoiser. Prints fidelity and the seam index per mode.

use tilefuse::degrade::degrade;
use tilefuse::denoiser::PriorDenoiser;
use tilefuse::metrics::{rmse_psnr, seam_index, MAX_8BIT};
use tilefuse::raster::{latent_to_pixels, pixels_to_latent};
use tilefuse::reference::{run_reference_chain, ChainSetup, FusionMode};
use tilefuse::scene::toy_scene;
use tilefuse::{BorderPolicy, CanvasSpec, GridSpec, NoiseSource, PatchGrid, ScheduleSpec, WeightWindow};

fn main() -> tilefuse::Result<()> {
    let hr = toy_scene(96);
    let condition = pixels_to_latent(&degrade(&hr, 5)?.condition);
    let canvas = CanvasSpec::new(96, 96, 3)?;
    let overlapping = PatchGrid::new(canvas, GridSpec::square(32, 16, BorderPolicy::ExactTiling))?;
    let tiled = PatchGrid::new(canvas, GridSpec::square(32, 32, BorderPolicy::ExactTiling))?;
    let window = WeightWindow::gaussian(32, 32, 8.0)?;
    let schedule = ScheduleSpec::FAST.build()?;
    let denoiser = PriorDenoiser::new(0.3, 0.3);

    for mode in [FusionMode::Independent, FusionMode::Naive, FusionMode::Corrected] {
        let grid = if mode == FusionMode::Independent { &tiled } else { &overlapping };
        let setup = ChainSetup {
            grid,
            window: &window,
            schedule: &schedule,
            denoiser: &denoiser,
            noise: NoiseSource::new(7),
            condition: &condition,
        };
        let pixels = latent_to_pixels(&run_reference_chain(&setup, mode, None)?);
        let f = rmse_psnr(&hr, &pixels, MAX_8BIT)?;
        println!(
            "{mode:?}: psnr {:.2} dB, seam index {:.4}",
            f.psnr,
            seam_index(&pixels, &tiled)?
        );
    }
    Ok(())
}
