//! Low-resolution synthesis: area-average downsampling, then bicubic
//! upsampling back to the high-resolution grid to form the condition.
//!
//! When a dimension is not divisible by the factor the image is padded by
//! edge replication up to the next multiple, degraded, and the condition is
//! cropped back to the original size. The LR image keeps the padded extent
//! (`ceil(dim / factor)`).

use crate::error::{Error, Result};
use crate::raster::{Raster, Shape};

/// Default factor: 3 m source imagery onto a 0.6 m target grid.
pub const DEFAULT_FACTOR: usize = 5;

/// Keys cubic convolution coefficient.
const CUBIC_A: f64 = -0.75;

#[derive(Clone, Debug, PartialEq)]
pub struct Degraded {
    pub lr: Raster,
    /// Bicubic upsampling of `lr`, same shape as the input.
    pub condition: Raster,
}

pub fn degrade(hr: &Raster, factor: usize) -> Result<Degraded> {
    if factor < 2 {
        return Err(Error::Invalid(format!("degradation factor must be at least 2, got {factor}")));
    }
    let (h, w) = (hr.height(), hr.width());
    let (ph, pw) = (h.div_ceil(factor) * factor, w.div_ceil(factor) * factor);
    let padded = if (ph, pw) == (h, w) {
        hr.clone()
    } else {
        Raster::from_fn(Shape::new(ph, pw, hr.channels()), |y, x, c| hr.get(y.min(h - 1), x.min(w - 1), c))
    };
    let lr = area_downsample(&padded, factor);
    let up = bicubic_resize(&lr, ph, pw);
    let condition = if (ph, pw) == (h, w) { up } else { up.crop(0, 0, h, w)? };
    Ok(Degraded { lr, condition })
}

/// Mean of each `factor x factor` block; dims must be divisible.
pub fn area_downsample(img: &Raster, factor: usize) -> Raster {
    let (oh, ow) = (img.height() / factor, img.width() / factor);
    let norm = (factor * factor) as f64;
    Raster::from_fn(Shape::new(oh, ow, img.channels()), |y, x, c| {
        let mut s = 0.0;
        for i in 0..factor {
            for j in 0..factor {
                s += img.get(y * factor + i, x * factor + j, c);
            }
        }
        s / norm
    })
}

fn cubic_weights(t: f64) -> [f64; 4] {
    let a = CUBIC_A;
    let w = |x: f64| {
        let x = x.abs();
        if x <= 1.0 {
            ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
        } else if x < 2.0 {
            ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
        } else {
            0.0
        }
    };
    [w(1.0 + t), w(t), w(1.0 - t), w(2.0 - t)]
}

/// Taps and weights along one axis, half-pixel centers, replicated borders.
fn axis_plan(src: usize, dst: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let x = (i as f64 + 0.5) * scale - 0.5;
            let x0 = x.floor();
            let wts = cubic_weights(x - x0);
            let idx = [-1, 0, 1, 2].map(|d| (x0 as i64 + d).clamp(0, src as i64 - 1) as usize);
            (idx, wts)
        })
        .collect()
}

/// Separable bicubic resize to `height x width`.
pub fn bicubic_resize(img: &Raster, height: usize, width: usize) -> Raster {
    let ch = img.channels();
    let rows = axis_plan(img.height(), height);
    let cols = axis_plan(img.width(), width);
    let horiz = Raster::from_fn(Shape::new(img.height(), width, ch), |y, x, c| {
        let (idx, wts) = &cols[x];
        (0..4).map(|k| wts[k] * img.get(y, idx[k], c)).sum()
    });
    Raster::from_fn(Shape::new(height, width, ch), |y, x, c| {
        let (idx, wts) = &rows[y];
        (0..4).map(|k| wts[k] * horiz.get(idx[k], x, c)).sum()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_survives() {
        for f in [2, 3, 5] {
            let img = Raster::filled(Shape::new(17, 20, 3), 93.0);
            let d = degrade(&img, f).unwrap();
            assert!(d.lr.data().iter().all(|&v| v == 93.0));
            assert!(d.condition.data().iter().all(|&v| (v - 93.0).abs() < 1e-9));
            assert_eq!(d.condition.shape(), img.shape());
            assert_eq!(d.lr.height(), 17usize.div_ceil(f));
        }
    }

    #[test]
    fn block_mean() {
        let img = Raster::from_vec(Shape::new(2, 2, 1), vec![0.0, 0.0, 255.0, 255.0]).unwrap();
        let d = degrade(&img, 2).unwrap();
        assert_eq!(d.lr.data(), &[127.5]);
        assert!(degrade(&img, 1).is_err());
    }

    #[test]
    fn cubic_weights_partition_unity_and_interpolate() {
        for t in [0.0, 0.1, 0.5, 0.9] {
            let s: f64 = cubic_weights(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-14);
        }
        assert_eq!(cubic_weights(0.0), [0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn upsampled_impulse_matches_hand_weights() {
        // x2 upsampling of a centred impulse: outputs 4 and 5 sample source
        // coordinates 1.75 and 2.25, both a quarter pixel from the impulse.
        let lr = Raster::from_vec(Shape::new(1, 5, 1), vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let up = bicubic_resize(&lr, 1, 10);
        assert_eq!(up.get(0, 4, 0), 0.87890625);
        assert_eq!(up.get(0, 5, 0), 0.87890625);
        let same = bicubic_resize(&lr, 1, 5);
        assert_eq!(same, lr);
    }
}
