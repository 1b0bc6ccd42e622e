use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::memory::{BufferClass, MemoryAccounting, MemoryReport};
use super::psi_apply;
use super::store::{StoreOptions, TileStore};
use crate::denoiser::{DenoiseRequest, Denoiser};
use crate::error::{Error, Result};
use crate::field::{CoefficientTiles, PatchCoefficients};
use crate::geometry::{BorderPolicy, PatchGrid, WeightWindow};
use crate::noise::NoiseSource;
use crate::raster::{Raster, Shape};
use crate::reference::{deterministic_component, reverse_step};
use crate::schedule::NoiseSchedule;

/// Where condition patches come from. Implemented for an in-core canvas;
/// large scenes can crop lazily from disk instead.
pub trait ConditionSource: Sync {
    fn shape(&self) -> Shape;
    fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Raster>;
}

impl ConditionSource for Raster {
    fn shape(&self) -> Shape {
        Raster::shape(self)
    }

    fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Raster> {
        Raster::crop(self, row, col, h, w)
    }
}

/// Order in which patches are fed through the pipeline at each step.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum PatchOrder {
    #[default]
    Ascending,
    /// A fresh permutation per timestep drawn from this seed.
    Shuffled(u64),
    /// Fixed permutation of `0..grid.len()`.
    Explicit(Vec<usize>),
}

/// How per-patch gain/shift maps are obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CoefficientSource {
    /// Cached periodic tiles when the grid allows it, local geometry otherwise.
    #[default]
    Auto,
    Tiles,
    Local,
}

#[derive(Clone, Debug)]
pub struct StreamConfig {
    pub store_dir: PathBuf,
    pub store: StoreOptions,
    /// Concurrent patch pipelines.
    pub parallelism: usize,
    /// Accumulate into per-patch slots and sum them in ascending patch order.
    pub deterministic: bool,
    pub order: PatchOrder,
    pub coefficients: CoefficientSource,
}

impl StreamConfig {
    pub fn new(store_dir: impl Into<PathBuf>) -> Self {
        Self {
            store_dir: store_dir.into(),
            store: StoreOptions::default(),
            parallelism: 1,
            deterministic: true,
            order: PatchOrder::Ascending,
            coefficients: CoefficientSource::Auto,
        }
    }
}

pub struct StreamSetup<'a> {
    pub grid: &'a PatchGrid,
    pub window: &'a WeightWindow,
    pub schedule: &'a NoiseSchedule,
    pub denoiser: &'a dyn Denoiser,
    pub noise: NoiseSource,
    /// Upsampled condition in latent range.
    pub condition: &'a dyn ConditionSource,
}

enum Coefficients {
    Tiles(CoefficientTiles),
    Local,
}

impl Coefficients {
    fn build(setup: &StreamSetup<'_>, source: CoefficientSource) -> Result<Self> {
        let periodic = setup.grid.spec().border_policy == BorderPolicy::ExactTiling && setup.grid.is_periodic();
        match source {
            CoefficientSource::Local => Ok(Self::Local),
            CoefficientSource::Auto if !periodic => Ok(Self::Local),
            _ => Ok(Self::Tiles(CoefficientTiles::precompute(setup.grid, setup.window)?)),
        }
    }

    fn bytes(&self) -> usize {
        match self {
            Self::Tiles(t) => t.bytes(),
            Self::Local => 0,
        }
    }
}

/// Permutation of patch indices used at timestep `t`.
pub fn patch_order(order: &PatchOrder, n: usize, t: usize) -> Result<Vec<usize>> {
    match order {
        PatchOrder::Ascending => Ok((0..n).collect()),
        PatchOrder::Shuffled(seed) => {
            let mut v: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            v.shuffle(&mut rng);
            Ok(v)
        }
        PatchOrder::Explicit(v) => {
            let mut seen = vec![false; n];
            for &k in v {
                if k >= n || std::mem::replace(&mut seen[k], true) {
                    return Err(Error::Invalid(format!("patch order is not a permutation of 0..{n}")));
                }
            }
            if v.len() != n {
                return Err(Error::Invalid(format!("patch order is not a permutation of 0..{n}")));
            }
            Ok(v.clone())
        }
    }
}

fn process_patch(
    setup: &StreamSetup<'_>,
    coeffs: &Coefficients,
    store: &TileStore,
    acct: &Arc<MemoryAccounting>,
    k: usize,
    t: usize,
) -> Result<()> {
    let grid = setup.grid;
    let (r, c) = grid.origin(k);
    let (h, w) = (grid.patch_h(), grid.patch_w());
    let shape = Shape::new(h, w, store.manifest().channels);
    let buf = shape.len() * std::mem::size_of::<f64>();

    let _latent_lease = acct.lease(BufferClass::Patch, buf);
    let latent = store.read_crop(r, c, h, w)?;
    let _cond_lease = acct.lease(BufferClass::Patch, buf);
    let condition = setup.condition.crop(r, c, h, w)?;
    let req = DenoiseRequest::new((r, c), condition, latent, setup.schedule.gamma(t)).map_err(|e| e.at_patch(k, t))?;
    let _eps_lease = acct.lease(BufferClass::Patch, buf);
    let eps = setup
        .denoiser
        .denoise(&req)
        .and_then(|resp| resp.validate(&req))
        .map_err(|e| e.at_patch(k, t))?
        .epsilon;
    let _d_lease = acct.lease(BufferClass::Patch, buf);
    let d = deterministic_component(&req.latent, &eps, setup.schedule, t)?;
    let _z_lease = acct.lease(BufferClass::Patch, buf);
    let z = if t == 1 {
        Raster::zeros(shape)
    } else {
        setup.noise.patch_noise(k, t, shape)
    };
    let _y_lease = acct.lease(BufferClass::Patch, buf);
    let y_prev = reverse_step(&d, setup.schedule.sigma(t), &z, t)?;

    let local;
    let _coeff_lease;
    let coefficients: &PatchCoefficients = match coeffs {
        Coefficients::Tiles(tiles) => tiles.for_patch(grid, k)?,
        Coefficients::Local => {
            _coeff_lease = acct.lease(BufferClass::Coefficients, 2 * h * w * std::mem::size_of::<f64>());
            local = PatchCoefficients::local(grid, setup.window, k);
            &local
        }
    };
    let _psi_lease = acct.lease(BufferClass::Patch, buf);
    let psi = psi_apply(&y_prev, &d, coefficients)?;
    if !psi.is_finite() {
        return Err(Error::Invalid(format!("non-finite contribution from patch {k} at timestep {t}")));
    }
    store.add_patch(r, c, &psi, |y, x| grid.slot_of(k, y, x))
}

fn check_setup(setup: &StreamSetup<'_>, store: &TileStore) -> Result<()> {
    setup.window.ensure_fits(setup.grid)?;
    let canvas = setup.grid.canvas().shape();
    if store.manifest().canvas() != canvas {
        return Err(Error::shape(canvas, store.manifest().canvas()));
    }
    if setup.condition.shape() != canvas {
        return Err(Error::shape(canvas, setup.condition.shape()));
    }
    Ok(())
}

fn with_pool<T: Send>(parallelism: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if parallelism <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Run the patch pipelines for `patches` against a store holding `Y*_t` and
/// accumulate their contributions into the pending generation. The store
/// must already be in an accumulation step (see [`TileStore::begin_step`]);
/// call [`TileStore::finish_step`] after every patch has been added.
///
/// Splitting the patch set across several stores and merging them with
/// [`super::merge_partials`] gives the same canvas as one full pass.
pub fn accumulate_step(
    setup: &StreamSetup<'_>,
    store: &TileStore,
    patches: &[usize],
    config: &StreamConfig,
    acct: &Arc<MemoryAccounting>,
) -> Result<()> {
    check_setup(setup, store)?;
    let t = store.timestep();
    if t == 0 || t > setup.schedule.steps() {
        return Err(Error::Invalid(format!(
            "store timestep {t} outside 1..={}",
            setup.schedule.steps()
        )));
    }
    let coeffs = Coefficients::build(setup, config.coefficients)?;
    let _coeff_lease = acct.lease(BufferClass::Coefficients, coeffs.bytes());
    run_patches(setup, &coeffs, store, patches, config, acct, t)?;
    store.flush()
}

fn run_patches(
    setup: &StreamSetup<'_>,
    coeffs: &Coefficients,
    store: &TileStore,
    patches: &[usize],
    config: &StreamConfig,
    acct: &Arc<MemoryAccounting>,
    t: usize,
) -> Result<()> {
    if config.parallelism <= 1 {
        return patches
            .iter()
            .try_for_each(|&k| process_patch(setup, coeffs, store, acct, k, t));
    }
    with_pool(config.parallelism, || {
        patches
            .par_iter()
            .with_max_len(1)
            .try_for_each(|&k| process_patch(setup, coeffs, store, acct, k, t))
    })?
}

/// Final store plus the accounting of everything the engine held in core.
pub struct StreamOutcome {
    pub store: TileStore,
    pub memory: MemoryReport,
}

impl StreamOutcome {
    /// Final latent canvas read back into core.
    pub fn canvas(&self) -> Result<Raster> {
        self.store.assemble()
    }
}

/// Full reverse chain through the tile store: initialize `Y*_T` from the
/// global noise field, then `T` accumulation passes down to `Y*_0`.
pub fn run_streaming_chain(setup: &StreamSetup<'_>, config: &StreamConfig) -> Result<StreamOutcome> {
    let acct = MemoryAccounting::new();
    let grid = setup.grid;
    let steps = setup.schedule.steps();
    let mut store = TileStore::create(&config.store_dir, grid.canvas(), config.store, &acct)?;
    check_setup(setup, &store)?;
    let noise = setup.noise;
    store.initialize(steps, |r, c, shape| noise.initial_window(r, c, shape))?;

    let coeffs = Coefficients::build(setup, config.coefficients)?;
    let _coeff_lease = acct.lease(BufferClass::Coefficients, coeffs.bytes());
    let slots = if config.deterministic { grid.max_cover() } else { 1 };
    for t in (1..=steps).rev() {
        let order = patch_order(&config.order, grid.len(), t)?;
        store.begin_step(slots)?;
        run_patches(setup, &coeffs, &store, &order, config, &acct, t)?;
        store.finish_step()?;
    }
    let memory = acct.report();
    Ok(StreamOutcome { store, memory })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{PriorDenoiser, ZeroDenoiser};
    use crate::geometry::{CanvasSpec, GridSpec};
    use crate::raster::Dtype;
    use crate::reference::{run_reference_chain, ChainSetup, FusionMode};

    struct Fixture {
        grid: PatchGrid,
        window: WeightWindow,
        schedule: NoiseSchedule,
        condition: Raster,
    }

    fn fixture(policy: BorderPolicy, canvas: (usize, usize)) -> Fixture {
        let c = CanvasSpec::new(canvas.0, canvas.1, 2).unwrap();
        let grid = PatchGrid::new(c, GridSpec::square(16, 8, policy)).unwrap();
        let window = WeightWindow::gaussian(16, 16, 4.0).unwrap();
        let schedule = NoiseSchedule::linear(6, 1e-3, 0.2).unwrap();
        let condition = Raster::from_fn(c.shape(), |y, x, ch| ((y * 3 + x + ch) % 11) as f64 / 5.5 - 1.0);
        Fixture {
            grid,
            window,
            schedule,
            condition,
        }
    }

    fn config(dir: &std::path::Path, dtype: Dtype) -> StreamConfig {
        let mut cfg = StreamConfig::new(dir);
        cfg.store = StoreOptions {
            tile_size: 24,
            dtype,
            cache_tiles: 4,
        };
        cfg
    }

    #[test]
    fn matches_reference_corrected_chain() {
        for policy in [BorderPolicy::ExactTiling, BorderPolicy::ClampLast] {
            let f = fixture(policy, if policy == BorderPolicy::ExactTiling { (40, 48) } else { (41, 45) });
            let den = PriorDenoiser::new(0.5, 0.3);
            let reference = run_reference_chain(
                &ChainSetup {
                    grid: &f.grid,
                    window: &f.window,
                    schedule: &f.schedule,
                    denoiser: &den,
                    noise: NoiseSource::new(9),
                    condition: &f.condition,
                },
                FusionMode::Corrected,
                None,
            )
            .unwrap();
            let dir = tempfile::tempdir().unwrap();
            let setup = StreamSetup {
                grid: &f.grid,
                window: &f.window,
                schedule: &f.schedule,
                denoiser: &den,
                noise: NoiseSource::new(9),
                condition: &f.condition,
            };
            let out = run_streaming_chain(&setup, &config(dir.path(), Dtype::F64)).unwrap();
            let diff = out.canvas().unwrap().max_abs_diff(&reference).unwrap();
            assert!(diff <= 1e-10, "{policy}: {diff}");
        }
    }

    #[test]
    fn order_and_parallelism_do_not_change_bits() {
        let f = fixture(BorderPolicy::ExactTiling, (40, 40));
        let den = PriorDenoiser::new(0.5, 0.3);
        let setup = StreamSetup {
            grid: &f.grid,
            window: &f.window,
            schedule: &f.schedule,
            denoiser: &den,
            noise: NoiseSource::new(3),
            condition: &f.condition,
        };
        let a_dir = tempfile::tempdir().unwrap();
        let a = run_streaming_chain(&setup, &config(a_dir.path(), Dtype::F32)).unwrap();
        let b_dir = tempfile::tempdir().unwrap();
        let mut cfg = config(b_dir.path(), Dtype::F32);
        cfg.order = PatchOrder::Shuffled(77);
        cfg.parallelism = 3;
        let b = run_streaming_chain(&setup, &cfg).unwrap();
        let (a, b) = (a.canvas().unwrap(), b.canvas().unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn constant_deterministic_component_is_preserved() {
        // Zero noise prediction at t = 1: D = y_t / sqrt(alpha_1); with a
        // constant canvas every patch yields the same constant.
        let f = fixture(BorderPolicy::ClampLast, (30, 30));
        let setup = StreamSetup {
            grid: &f.grid,
            window: &f.window,
            schedule: &f.schedule,
            denoiser: &ZeroDenoiser,
            noise: NoiseSource::new(1),
            condition: &f.condition,
        };
        let acct = MemoryAccounting::new();
        let dir = tempfile::tempdir().unwrap();
        let mut store = TileStore::create(dir.path(), f.grid.canvas(), StoreOptions::default(), &acct).unwrap();
        store.initialize(1, |_, _, s| Raster::filled(s, 0.3)).unwrap();
        store.begin_step(f.grid.max_cover()).unwrap();
        let all: Vec<usize> = (0..f.grid.len()).collect();
        let cfg = StreamConfig::new(dir.path());
        accumulate_step(&setup, &store, &all, &cfg, &acct).unwrap();
        store.finish_step().unwrap();
        let expected = (0.3f32 as f64) / f.schedule.alpha(1).sqrt();
        let out = store.assemble().unwrap();
        assert!(out.data().iter().all(|v| (v - expected).abs() < 1e-6));
    }

    #[test]
    fn denoiser_failure_reports_patch_and_timestep() {
        struct Failing;
        impl Denoiser for Failing {
            fn denoise(&self, req: &DenoiseRequest) -> Result<crate::denoiser::DenoiseResponse> {
                if req.origin == (8, 8) {
                    Err(Error::Protocol("boom".into()))
                } else {
                    ZeroDenoiser.denoise(req)
                }
            }
        }
        let f = fixture(BorderPolicy::ExactTiling, (32, 32));
        let setup = StreamSetup {
            grid: &f.grid,
            window: &f.window,
            schedule: &f.schedule,
            denoiser: &Failing,
            noise: NoiseSource::new(1),
            condition: &f.condition,
        };
        let dir = tempfile::tempdir().unwrap();
        let err = run_streaming_chain(&setup, &StreamConfig::new(dir.path())).err().unwrap();
        let k = f.grid.index_of(1, 1);
        assert!(matches!(err, Error::Denoise { patch, timestep: 6, .. } if patch == k), "{err}");
    }

    #[test]
    fn explicit_order_must_be_a_permutation() {
        assert!(patch_order(&PatchOrder::Explicit(vec![0, 0, 1]), 3, 1).is_err());
        assert!(patch_order(&PatchOrder::Explicit(vec![2, 0]), 3, 1).is_err());
        assert_eq!(patch_order(&PatchOrder::Explicit(vec![2, 0, 1]), 3, 1).unwrap(), vec![2, 0, 1]);
        let mut s = patch_order(&PatchOrder::Shuffled(5), 50, 3).unwrap();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }
}
