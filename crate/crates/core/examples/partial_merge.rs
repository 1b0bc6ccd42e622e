//! Split one accumulation step across two stores, as two workers would, then
//! merge the partial sums and finish the step.

use tilefuse::denoiser::PriorDenoiser;
use tilefuse::mda::{accumulate_step, merge_partials, MemoryAccounting, StreamConfig, StreamSetup, TileStore};
use tilefuse::{BorderPolicy, CanvasSpec, GridSpec, NoiseSchedule, NoiseSource, PatchGrid, Raster, WeightWindow};

fn main() -> anyhow::Result<()> {
    let tmp = tempfile::tempdir()?;
    let canvas = CanvasSpec::new(64, 96, 1)?;
    let grid = PatchGrid::new(canvas, GridSpec::square(32, 16, BorderPolicy::ExactTiling))?;
    let window = WeightWindow::constant(32, 32);
    let schedule = NoiseSchedule::linear(8, 1e-3, 0.2)?;
    let condition = Raster::zeros(canvas.shape());
    let denoiser = PriorDenoiser::new(0.4, 0.3);
    let noise = NoiseSource::new(5);
    let setup = StreamSetup { grid: &grid, window: &window, schedule: &schedule, denoiser: &denoiser, noise, condition: &condition };

    let (left, right): (Vec<usize>, Vec<usize>) = (0..grid.len()).partition(|&k| grid.origin(k).1 < 32);
    for (name, patches) in [("worker-a", &left), ("worker-b", &right)] {
        let dir = tmp.path().join(name);
        let acct = MemoryAccounting::new();
        let cfg = StreamConfig::new(&dir);
        let mut store = TileStore::create(&dir, canvas, cfg.store, &acct)?;
        store.initialize(schedule.steps(), |r, c, s| noise.initial_window(r, c, s))?;
        store.begin_step(grid.max_cover())?;
        accumulate_step(&setup, &store, patches, &cfg, &acct)?;
        println!("{name}: {} patches accumulated", patches.len());
    }

    let merged_dir = tmp.path().join("merged");
    let m = merge_partials(&tmp.path().join("worker-a"), &tmp.path().join("worker-b"), &merged_dir)?;
    println!("merged store at timestep {} (generation {})", m.timestep, m.generation);
    let acct = MemoryAccounting::new();
    let mut merged = TileStore::open(&merged_dir, 4, &acct)?;
    merged.finish_step()?;
    let (lo, hi) = merged.assemble()?.min_max();
    println!("after the step: timestep {}, values in [{lo:.3}, {hi:.3}]", merged.timestep());
    Ok(())
}
