//! Dense row-major, channel-last grids and the flat-binary grid format.
//!
//! A flat grid on disk is a pair of files: `<base>.bin` holding the raw
//! little-endian samples and `<base>.toml` describing the shape and dtype.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `height x width x channels` shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Sample type used when a grid is written to disk.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    /// Round a value to what this dtype can represent.
    #[inline]
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            Dtype::F32 => v as f32 as f64,
            Dtype::F64 => v,
        }
    }

    pub fn encode(self, values: &[f64]) -> Vec<u8> {
        let mut out = Vec::with_capacity(values.len() * self.size());
        match self {
            Dtype::F32 => values
                .iter()
                .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            Dtype::F64 => values
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        out
    }

    pub fn decode(self, bytes: &[u8]) -> Result<Vec<f64>> {
        if bytes.len() % self.size() != 0 {
            return Err(Error::Invalid(format!(
                "{} bytes is not a whole number of {:?} samples",
                bytes.len(),
                self
            )));
        }
        Ok(match self {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        })
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        })
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::Config(format!("unknown dtype `{other}` (expected f32 or f64)"))),
        }
    }
}

/// A dense `H x W x C` grid of reals, row-major and channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    shape: Shape,
    data: Vec<f64>,
}

impl Raster {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                format!("{} ({} values)", shape, shape.len()),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for y in 0..shape.height {
            for x in 0..shape.width {
                for c in 0..shape.channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        debug_assert!(y < self.shape.height && x < self.shape.width && c < self.shape.channels);
        (y * self.shape.width + x) * self.shape.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    /// Channel values of one pixel.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.shape.channels]
    }

    /// Copy out an `h x w` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Raster> {
        if row + h > self.shape.height || col + w > self.shape.width {
            return Err(Error::Invalid(format!(
                "crop {h}x{w} at ({row}, {col}) exceeds {}x{} raster",
                self.shape.height, self.shape.width
            )));
        }
        let c = self.shape.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for y in row..row + h {
            let start = self.index(y, col, 0);
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(Raster {
            shape: Shape::new(h, w, c),
            data,
        })
    }

    /// Write `src` into this raster with its top-left corner at `(row, col)`.
    pub fn paste(&mut self, src: &Raster, row: usize, col: usize) -> Result<()> {
        let s = src.shape;
        if s.channels != self.shape.channels
            || row + s.height > self.shape.height
            || col + s.width > self.shape.width
        {
            return Err(Error::shape(
                format!("window inside {}", self.shape),
                format!("{} at ({row}, {col})", s),
            ));
        }
        for y in 0..s.height {
            let dst = self.index(row + y, col, 0);
            let srci = src.index(y, 0, 0);
            let n = s.width * s.channels;
            self.data[dst..dst + n].copy_from_slice(&src.data[srci..srci + n]);
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        Raster {
            shape: self.shape,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn ensure_same_shape(&self, other: &Raster) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(self.shape, other.shape));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Raster) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(*v), hi.max(*v))
            })
    }
}

/// Map 8-bit pixel values (0..=255) onto the latent range [-1, 1].
pub fn pixels_to_latent(img: &Raster) -> Raster {
    img.map(|v| v / 127.5 - 1.0)
}

/// Clamp latents to [-1, 1] and map back onto 0..=255 (unrounded).
pub fn latent_to_pixels(latent: &Raster) -> Raster {
    latent.map(|v| (v.clamp(-1.0, 1.0) + 1.0) * 127.5)
}

#[derive(Debug, Serialize, Deserialize)]
struct GridManifest {
    height: usize,
    width: usize,
    channels: usize,
    dtype: Dtype,
    layout: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
}

const LAYOUT: &str = "row-major channel-last little-endian";

fn grid_paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("bin"), base.with_extension("toml"))
}

/// Write `raster` as `<base>.bin` plus a `<base>.toml` manifest.
pub fn write_grid(
    base: &Path,
    raster: &Raster,
    dtype: Dtype,
    meta: BTreeMap<String, String>,
) -> Result<()> {
    let (bin, manifest) = grid_paths(base);
    if let Some(parent) = bin.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&bin, dtype.encode(&raster.data))?;
    let m = GridManifest {
        height: raster.height(),
        width: raster.width(),
        channels: raster.channels(),
        dtype,
        layout: LAYOUT.to_string(),
        meta,
    };
    fs::write(&manifest, toml::to_string(&m).expect("manifest serializes"))?;
    Ok(())
}

/// Read a grid written by [`write_grid`], returning it with its manifest metadata.
pub fn read_grid(base: &Path) -> Result<(Raster, BTreeMap<String, String>)> {
    let (bin, manifest) = grid_paths(base);
    let text = fs::read_to_string(&manifest)?;
    let m: GridManifest = toml::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest.clone(),
        message: e.to_string(),
    })?;
    let values = m.dtype.decode(&fs::read(&bin)?)?;
    let raster = Raster::from_vec(Shape::new(m.height, m.width, m.channels), values)?;
    Ok((raster, m.meta))
}

/// Load an 8-bit PNG (gray or RGB) as pixel values in 0..=255.
pub fn load_png(path: &Path) -> Result<Raster> {
    let img = image::open(path)?;
    let raster = match img.color().channel_count() {
        1 | 2 => {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            Raster::from_vec(
                Shape::new(h as usize, w as usize, 1),
                g.into_raw().into_iter().map(f64::from).collect(),
            )?
        }
        _ => {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            Raster::from_vec(
                Shape::new(h as usize, w as usize, 3),
                rgb.into_raw().into_iter().map(f64::from).collect(),
            )?
        }
    };
    Ok(raster)
}

/// Quantize pixel values (0..=255 scale) to 8 bits.
pub fn quantize_u8(pixels: &Raster) -> Vec<u8> {
    pixels
        .data()
        .iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Save pixel values (0..=255 scale) as an 8-bit gray or RGB PNG.
pub fn save_png(path: &Path, pixels: &Raster) -> Result<()> {
    let (w, h) = (pixels.width() as u32, pixels.height() as u32);
    let bytes = quantize_u8(pixels);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    match pixels.channels() {
        1 => image::GrayImage::from_raw(w, h, bytes)
            .expect("buffer sized from shape")
            .save(path)?,
        3 => image::RgbImage::from_raw(w, h, bytes)
            .expect("buffer sized from shape")
            .save(path)?,
        c => {
            return Err(Error::Invalid(format!(
                "PNG output supports 1 or 3 channels, got {c}"
            )))
        }
    }
    Ok(())
}
