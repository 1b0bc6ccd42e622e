use std::path::Path;
use std::process::{Command, Output};

use tilefuse::raster::{load_png, read_grid, save_png};
use tilefuse::scene::toy_scene;
use tilefuse::stitch::{write_patch_list, PatchPrediction};
use tilefuse::{Raster, Shape};

fn tilefuse(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tilefuse"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn plan_reports_field_extrema() {
    let dir = tempfile::tempdir().unwrap();
    let text = stdout(&tilefuse(
        &["plan", "--canvas", "96x96", "--patch", "32", "--stride", "16", "--border", "exact-tiling", "--dump", "f"],
        dir.path(),
    ));
    assert!(text.contains("patches: 25"), "{text}");
    assert!(text.contains("max_cover: 4"), "{text}");
    assert!(text.contains("lambda_min: 0.25"), "{text}");
    let (lambda, _) = read_grid(&dir.path().join("f_lambda")).unwrap();
    assert_eq!(lambda.get(40, 40, 0), 0.25);
    assert_eq!(lambda.get(0, 0, 0), 1.0);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = tilefuse(&["plan", "--canvas", "8x8", "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = tilefuse(&["run", "--mode", "fancy"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn failures_exit_with_one_and_context() {
    let dir = tempfile::tempdir().unwrap();
    let o = tilefuse(&["run", "--input", "missing.png", "--steps", "2"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.png"));
}

#[test]
fn verify_suites_pass() {
    let dir = tempfile::tempdir().unwrap();
    let text = stdout(&tilefuse(
        &["verify", "--suite", "equivalence", "--cases", "4", "--steps", "3", "--scratch", "s"],
        dir.path(),
    ));
    assert!(text.contains("result: pass"), "{text}");
    let text = stdout(&tilefuse(&["verify", "--suite", "periodicity"], dir.path()));
    assert!(text.contains("result: pass"), "{text}");
}

#[test]
fn degrade_writes_lr_and_condition() {
    let dir = tempfile::tempdir().unwrap();
    save_png(&dir.path().join("hr.png"), &toy_scene(40)).unwrap();
    stdout(&tilefuse(
        &["degrade", "--input", "hr.png", "--factor", "5", "--lr", "lr.png", "--condition", "cond.png"],
        dir.path(),
    ));
    let lr = load_png(&dir.path().join("lr.png")).unwrap();
    let cond = load_png(&dir.path().join("cond.png")).unwrap();
    assert_eq!((lr.height(), lr.width(), lr.channels()), (8, 8, 3));
    assert_eq!((cond.height(), cond.width()), (40, 40));
}

#[test]
fn stitch_blends_and_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let patches: Vec<PatchPrediction> = [(0, 0), (0, 8), (8, 0), (8, 8)]
        .into_iter()
        .map(|origin| PatchPrediction {
            origin,
            probabilities: Raster::filled(Shape::new(16, 16, 1), if origin.1 == 0 { 0.9 } else { 0.1 }),
        })
        .collect();
    write_patch_list(&dir.path().join("p.toml"), 24, 24, &patches).unwrap();
    let text = stdout(&tilefuse(
        &["stitch", "--patches", "p.toml", "--output", "blend", "--mask", "mask.png"],
        dir.path(),
    ));
    assert!(text.contains("patches: 4"), "{text}");
    let (blend, _) = read_grid(&dir.path().join("blend")).unwrap();
    assert!((blend.get(0, 0, 0) - 0.9).abs() < 1e-6);
    assert!((blend.get(23, 23, 0) - 0.1).abs() < 1e-6);
    let mask = load_png(&dir.path().join("mask.png")).unwrap();
    assert_eq!(mask.get(0, 0, 0), 255.0);
    assert_eq!(mask.get(0, 23, 0), 0.0);
}

#[test]
fn metrics_identical_images() {
    let dir = tempfile::tempdir().unwrap();
    save_png(&dir.path().join("a.png"), &toy_scene(96)).unwrap();
    let text = stdout(&tilefuse(
        &["metrics", "--reference", "a.png", "--candidate", "a.png", "--seam-patch", "32", "--json"],
        dir.path(),
    ));
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["rmse"], 0.0);
    assert_eq!(v["psnr"], "inf");
    assert_eq!(v["ssim"], 1.0);
}

#[test]
fn run_then_merge_partials_rejects_finished_stores() {
    let dir = tempfile::tempdir().unwrap();
    let text = stdout(&tilefuse(
        &["run", "--mode", "mda", "--steps", "3", "--beta-start", "1e-3", "--beta-end", "0.2", "--denoiser", "zero", "--store", "st", "--output", "o.png"],
        dir.path(),
    ));
    assert!(text.contains("peak_bytes"), "{text}");
    assert!(dir.path().join("o_latent.bin").exists());
    let o = tilefuse(&["merge-partials", "st", "st", "-o", "merged"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}
