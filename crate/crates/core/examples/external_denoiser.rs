//! Drive a denoiser subprocess over the framed stdin/stdout protocol.
//!
//! By default this launches the bundled zero-noise server
//! (`tilefuse serve-echo-zero`) from the same target directory; pass another
//! command line to talk to your own server.

use std::time::Duration;

use tilefuse::denoiser::{DenoiseRequest, Denoiser, ExternalConfig, ExternalDenoiser};
use tilefuse::{Raster, Shape};

fn main() -> anyhow::Result<()> {
    let cmd = match std::env::args().nth(1) {
        Some(c) => c,
        None => {
            let exe = std::env::current_exe()?;
            let bin = exe.parent().and_then(|p| p.parent()).map(|d| d.join("tilefuse"));
            let bin = bin.filter(|b| b.exists()).ok_or_else(|| anyhow::anyhow!("build the tilefuse binary first (cargo build)"))?;
            format!("{} serve-echo-zero", bin.display())
        }
    };
    let mut cfg = ExternalConfig::from_command_line(&cmd)?;
    cfg.timeout = Duration::from_secs(5);
    let denoiser = ExternalDenoiser::spawn(cfg)?;

    let shape = Shape::new(32, 32, 3);
    let condition = Raster::from_fn(shape, |y, x, _| ((y + x) as f64 / 64.0) * 2.0 - 1.0);
    let latent = Raster::from_fn(shape, |y, _, c| (y as f64 * 0.1 + c as f64).sin());
    for gamma in [0.9, 0.5, 0.1] {
        let req = DenoiseRequest::new((0, 0), condition.clone(), latent.clone(), gamma)?;
        let eps = denoiser.denoise(&req)?.epsilon;
        let (lo, hi) = eps.min_max();
        println!("gamma {gamma}: epsilon {} in [{lo}, {hi}]", eps.shape());
    }
    Ok(())
}
