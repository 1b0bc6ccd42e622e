//! Blend overlapping per-patch class probabilities with a Gaussian window and
//! threshold the result into a mask.

use tilefuse::stitch::{blend_predictions, gaussian_blend_window, threshold_mask, PatchPrediction, DEFAULT_THRESHOLD};
use tilefuse::{Raster, Shape};

fn main() -> tilefuse::Result<()> {
    let size = 16;
    let (h, w) = (24, 40);
    // A vertical field boundary at column 20 that each patch sees with its own confidence.
    let patches: Vec<PatchPrediction> = (0..=8)
        .step_by(8)
        .flat_map(|r| (0..=24).step_by(8).map(move |c| (r, c)))
        .map(|(r, c)| PatchPrediction {
            origin: (r, c),
            probabilities: Raster::from_fn(Shape::new(size, size, 1), |_, j, _| {
                let confidence = 0.6 + 0.05 * (c / 8) as f64;
                if c + j < 20 { confidence } else { 1.0 - confidence }
            }),
        })
        .collect();
    let window = gaussian_blend_window(size, size as f64 / 4.0)?;
    let blended = blend_predictions(&patches, h, w, &window)?;
    let mask = threshold_mask(&blended, DEFAULT_THRESHOLD);
    for y in [0, 12, 23] {
        let row: String = (0..w).map(|x| if mask.get(y, x, 0) == 1.0 { '#' } else { '.' }).collect();
        println!("row {y:>2}: {row}");
    }
    println!("p(12, 19) = {:.4}, p(12, 20) = {:.4}", blended.get(12, 19, 0), blended.get(12, 20, 0));
    Ok(())
}
