//! Lay a patch grid over a canvas and inspect the normalization field and the
//! cached coefficient tiles.

use tilefuse::{BorderPolicy, CanvasSpec, CoefficientTiles, GridSpec, NormalizationField, PatchGrid, WeightWindow};

fn main() -> tilefuse::Result<()> {
    let canvas = CanvasSpec::new(96, 128, 3)?;
    let grid = PatchGrid::new(canvas, GridSpec::square(32, 16, BorderPolicy::ExactTiling))?;
    let window = WeightWindow::gaussian(32, 32, 8.0)?;
    let field = NormalizationField::compute(&grid, &window)?;

    println!("{} patches on a {} canvas", grid.len(), canvas.shape());
    println!("row origins: {:?}", grid.row_origins());
    println!("col origins: {:?}", grid.col_origins());
    for (y, x) in [(0, 0), (8, 40), (40, 40), (48, 64)] {
        println!(
            "pixel ({y:>2}, {x:>2}): cover {}  W = {:.4}  S = {:.4}  lambda = {:.4}",
            grid.coverage_at(y, x)?.len(),
            field.w(y, x),
            field.s(y, x),
            field.lambda(y, x)
        );
    }

    let tiles = CoefficientTiles::precompute(&grid, &window)?;
    println!(
        "coefficient classes: {} ({} bytes, period {:?})",
        tiles.class_count(),
        tiles.bytes(),
        tiles.period()
    );
    let k = grid.index_of(2, 3);
    let worst = tiles.for_patch(&grid, k)?.max_abs_diff(&field.patch_coefficients(&grid, &window, k));
    println!("patch {k}: cached vs direct coefficients differ by {worst:e}");
    Ok(())
}
