//! Write the toy scene, its low-resolution version and the bicubic condition
//! image as PNGs.

use std::path::PathBuf;

use tilefuse::degrade::{degrade, DEFAULT_FACTOR};
use tilefuse::raster::save_png;
use tilefuse::scene::{toy_scene, TOY_SIZE};

fn main() -> tilefuse::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    std::fs::create_dir_all(&out)?;
    let hr = toy_scene(TOY_SIZE);
    let d = degrade(&hr, DEFAULT_FACTOR)?;
    for (name, img) in [("scene_hr.png", &hr), ("scene_lr.png", &d.lr), ("scene_condition.png", &d.condition)] {
        let path = out.join(name);
        save_png(&path, img)?;
        println!("{} x {} -> {}", img.height(), img.width(), path.display());
    }
    Ok(())
}
