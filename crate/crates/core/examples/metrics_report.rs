//! Score the bicubic baseline against the toy scene and export FID crops.

use tilefuse::degrade::degrade;
use tilefuse::metrics::{fid_patch_export, rmse_psnr, seam_index, segmentation_scores, ssim, MetricReport, MAX_8BIT, SSIM_SIGMA, SSIM_WINDOW};
use tilefuse::scene::toy_scene;
use tilefuse::{BorderPolicy, CanvasSpec, GridSpec, PatchGrid};

fn main() -> anyhow::Result<()> {
    let hr = toy_scene(320);
    let baseline = degrade(&hr, 5)?.condition;
    let f = rmse_psnr(&hr, &baseline, MAX_8BIT)?;
    let canvas = CanvasSpec::new(320, 320, 3)?;
    let grid = PatchGrid::new(canvas, GridSpec::square(64, 64, BorderPolicy::ClampLast))?;

    // Bright pixels as a stand-in segmentation target.
    let bright = |img: &tilefuse::Raster| img.map(|v| if v > 150.0 { 1.0 } else { 0.0 });
    let tmp = tempfile::tempdir()?;
    let export = fid_patch_export(&baseline, tmp.path())?;

    let report = MetricReport {
        rmse: Some(f.rmse),
        psnr: Some(f.psnr),
        ssim: Some(ssim(&hr, &baseline, SSIM_WINDOW, SSIM_SIGMA, MAX_8BIT)?),
        seam_index: Some(seam_index(&baseline, &grid)?),
        segmentation: Some(segmentation_scores(&bright(&baseline), &bright(&hr))?),
        fid_patches: Some((export.patch.len(), tmp.path().to_path_buf())),
    };
    print!("{report}");
    println!("{}", report.to_json());
    Ok(())
}
