//! Small synthetic aerial-style scene for end-to-end runs: field parcels,
//! a diagonal road, a river and a few buildings, none aligned to any patch grid.

use crate::raster::{Raster, Shape};

pub const TOY_SIZE: usize = 96;

/// Bundled copy of [`toy_scene`] as an RGB PNG.
pub const TOY_SCENE_PNG: &[u8] = include_bytes!("../assets/toy_scene.png");

const PARCELS: [[f64; 3]; 4] = [
    [112.0, 140.0, 64.0],
    [164.0, 150.0, 96.0],
    [86.0, 118.0, 58.0],
    [190.0, 176.0, 120.0],
];

/// The toy scene at `size x size`, RGB, values in 0..=255 (integral).
pub fn toy_scene(size: usize) -> Raster {
    let s = size as f64;
    Raster::from_fn(Shape::new(size, size, 3), |y, x, c| {
        let (fy, fx) = (y as f64 / s, x as f64 / s);
        // parcels split by two slanted lines
        let a = fx + 0.3 * fy > 0.45;
        let b = fy - 0.2 * fx > 0.55;
        let mut v = PARCELS[(a as usize) | ((b as usize) << 1)][c];
        // furrows
        v += 6.0 * ((x + 2 * y) % 7) as f64 / 6.0 - 3.0;
        // river: sinusoidal band
        let centre = 0.25 + 0.08 * (fx * 9.0).sin();
        if (fy - centre).abs() < 0.045 {
            v = [52.0, 84.0, 128.0][c];
        }
        // road: diagonal band
        if ((fx - fy) - 0.1).abs() < 0.03 {
            v = [140.0, 138.0, 134.0][c];
        }
        // buildings
        for &(r0, c0, h, w) in &[(0.62, 0.12, 0.09, 0.13), (0.70, 0.66, 0.12, 0.08), (0.40, 0.78, 0.07, 0.1)] {
            if fy >= r0 && fy < r0 + h && fx >= c0 && fx < c0 + w {
                v = [206.0, 92.0, 80.0][c];
            }
        }
        v.round().clamp(0.0, 255.0)
    })
}
