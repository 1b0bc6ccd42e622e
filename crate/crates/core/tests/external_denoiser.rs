use std::time::{Duration, Instant};

use tilefuse::denoiser::{DenoiseRequest, Denoiser, ExternalConfig, ExternalDenoiser, ZeroDenoiser};
use tilefuse::mda::{run_streaming_chain, StreamConfig, StreamSetup};
use tilefuse::{BorderPolicy, CanvasSpec, Dtype, Error, GridSpec, NoiseSchedule, NoiseSource, PatchGrid, Raster, Shape, WeightWindow};

fn server(fault: Option<&str>, timeout: Duration) -> ExternalDenoiser {
    let mut args = vec!["serve-echo-zero".to_string()];
    if let Some(f) = fault {
        args.extend(["--fault".to_string(), f.to_string()]);
    }
    let mut cfg = ExternalConfig::new(env!("CARGO_BIN_EXE_tilefuse"), args);
    cfg.timeout = timeout;
    ExternalDenoiser::spawn(cfg).unwrap()
}

fn request() -> DenoiseRequest {
    let shape = Shape::new(8, 6, 3);
    let cond = Raster::from_fn(shape, |y, x, c| (y as f64 - x as f64 + c as f64) / 20.0);
    let latent = Raster::from_fn(shape, |y, x, c| (y * x + c) as f64 / 50.0 - 0.5);
    DenoiseRequest::new((4, 2), cond, latent, 0.3).unwrap()
}

#[test]
fn echo_zero_round_trips() {
    let d = server(None, Duration::from_secs(10));
    let req = request();
    for _ in 0..3 {
        let eps = d.denoise(&req).unwrap().epsilon;
        assert_eq!(eps, Raster::zeros(req.latent.shape()));
    }
}

#[test]
fn faults_surface_as_errors() {
    for fault in ["bad-magic", "bad-shape", "nan", "exit"] {
        let d = server(Some(fault), Duration::from_secs(10));
        let err = d.denoise(&request()).unwrap_err();
        assert!(!matches!(err, Error::Timeout(_)), "{fault}: {err}");
        // The channel stays poisoned after a failure.
        assert!(d.denoise(&request()).is_err(), "{fault}");
    }
}

#[test]
fn hang_hits_timeout() {
    let d = server(Some("hang"), Duration::from_millis(300));
    let start = Instant::now();
    let err = d.denoise(&request()).unwrap_err();
    assert!(matches!(err, Error::Timeout(_)), "{err}");
    assert!(start.elapsed() < Duration::from_secs(5));
}

#[test]
fn streaming_chain_through_subprocess_matches_in_process() {
    let canvas = CanvasSpec::new(40, 48, 2).unwrap();
    let grid = PatchGrid::new(canvas, GridSpec::square(16, 8, BorderPolicy::ExactTiling)).unwrap();
    let window = WeightWindow::gaussian(16, 16, 4.0).unwrap();
    let schedule = NoiseSchedule::linear(4, 1e-3, 0.2).unwrap();
    let condition = Raster::from_fn(canvas.shape(), |y, x, _| ((y + x) as f64 / 30.0).sin());
    let external = server(None, Duration::from_secs(10));
    let run = |den: &dyn Denoiser, dir: &std::path::Path| {
        let mut cfg = StreamConfig::new(dir);
        cfg.store.dtype = Dtype::F64;
        run_streaming_chain(
            &StreamSetup {
                grid: &grid,
                window: &window,
                schedule: &schedule,
                denoiser: den,
                noise: NoiseSource::new(3),
                condition: &condition,
            },
            &cfg,
        )
        .unwrap()
        .canvas()
        .unwrap()
    };
    let tmp = tempfile::tempdir().unwrap();
    let a = run(&external, &tmp.path().join("ext"));
    let b = run(&ZeroDenoiser, &tmp.path().join("zero"));
    assert_eq!(a, b);
}
