//! Out-of-core canvas as fixed-size tiles on disk.
//!
//! Layout under the store root:
//!
//! ```text
//! manifest.toml
//! gen0/tile_<ty>_<tx>.bin
//! gen1/tile_<ty>_<tx>.bin
//! ```
//!
//! The read generation holds `Y*_t`; the other one accumulates `Y*_{t-1}`.
//! Finished tiles are row-major channel-last little-endian samples of the
//! manifest dtype. While a step is pending, accumulator tiles carry `slots`
//! values per pixel and channel (`((y * tw + x) * slots + s) * C + c`), one
//! slot per covering patch in ascending patch order, so the final per-pixel
//! sum does not depend on the order patches arrived in.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::memory::{BufferClass, Lease, MemoryAccounting};
use crate::error::{Error, Result};
use crate::geometry::CanvasSpec;
use crate::raster::{Dtype, Raster, Shape};

const MANIFEST: &str = "manifest.toml";
const LAYOUT: &str = "row-major channel-last little-endian";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub tile_size: usize,
    pub dtype: Dtype,
    /// Timestep of the canvas held by the read generation.
    pub timestep: usize,
    /// Read generation counter; its tiles live in `gen<generation % 2>`.
    pub generation: u64,
    /// True while the write generation holds an unfinished accumulation.
    pub pending: bool,
    /// Values per pixel and channel in pending accumulator tiles.
    pub slots: usize,
    pub layout: String,
}

impl StoreManifest {
    pub fn canvas(&self) -> Shape {
        Shape::new(self.height, self.width, self.channels)
    }

    fn tiles_y(&self) -> usize {
        self.height.div_ceil(self.tile_size)
    }

    fn tiles_x(&self) -> usize {
        self.width.div_ceil(self.tile_size)
    }

    /// `(row, col, height, width)` of a tile.
    pub fn tile_rect(&self, key: TileKey) -> (usize, usize, usize, usize) {
        let (r, c) = (key.0 * self.tile_size, key.1 * self.tile_size);
        (
            r,
            c,
            self.tile_size.min(self.height - r),
            self.tile_size.min(self.width - c),
        )
    }

    pub fn tile_keys(&self) -> impl Iterator<Item = TileKey> {
        let (ny, nx) = (self.tiles_y(), self.tiles_x());
        (0..ny).flat_map(move |y| (0..nx).map(move |x| TileKey(y, x)))
    }

    /// Tiles intersecting the window `[row, row + h) x [col, col + w)`.
    pub fn keys_overlapping(&self, row: usize, col: usize, h: usize, w: usize) -> Vec<TileKey> {
        let ts = self.tile_size;
        let (y0, y1) = (row / ts, (row + h - 1) / ts);
        let (x0, x1) = (col / ts, (col + w - 1) / ts);
        (y0..=y1)
            .flat_map(|y| (x0..=x1).map(move |x| TileKey(y, x)))
            .collect()
    }

    fn read_dir(&self) -> String {
        format!("gen{}", self.generation % 2)
    }

    fn write_dir(&self) -> String {
        format!("gen{}", (self.generation + 1) % 2)
    }

    fn check_compatible(&self, other: &StoreManifest) -> Result<()> {
        let same = self.height == other.height
            && self.width == other.width
            && self.channels == other.channels
            && self.tile_size == other.tile_size
            && self.dtype == other.dtype
            && self.timestep == other.timestep
            && self.generation == other.generation
            && self.slots == other.slots;
        if !same {
            return Err(Error::Invalid(format!(
                "incompatible tile stores: {self:?} vs {other:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileKey(pub usize, pub usize);

fn tile_file(dir: &Path, key: TileKey) -> PathBuf {
    dir.join(format!("tile_{:04}_{:04}.bin", key.0, key.1))
}

struct Tile {
    data: Vec<f64>,
    dirty: bool,
    _lease: Lease,
}

#[derive(Default)]
struct CacheState {
    map: HashMap<TileKey, (Arc<Mutex<Tile>>, u64)>,
    tick: u64,
}

/// LRU cache of tiles of one generation. Tiles in use are never evicted, so
/// the resident set can exceed `capacity` by the number of tiles pinned by
/// concurrent patch pipelines.
struct TileCache {
    dir: PathBuf,
    manifest: StoreManifest,
    slots: usize,
    capacity: usize,
    zero_missing: bool,
    acct: Arc<MemoryAccounting>,
    state: Mutex<CacheState>,
}

impl TileCache {
    fn new(
        dir: PathBuf,
        manifest: &StoreManifest,
        slots: usize,
        capacity: usize,
        zero_missing: bool,
        acct: &Arc<MemoryAccounting>,
    ) -> Self {
        Self {
            dir,
            manifest: manifest.clone(),
            slots,
            capacity: capacity.max(1),
            zero_missing,
            acct: Arc::clone(acct),
            state: Mutex::new(CacheState::default()),
        }
    }

    fn tile_len(&self, key: TileKey) -> usize {
        let (_, _, h, w) = self.manifest.tile_rect(key);
        h * w * self.slots * self.manifest.channels
    }

    fn load(&self, key: TileKey) -> Result<Tile> {
        let n = self.tile_len(key);
        let lease = self.acct.lease(BufferClass::Tile, n * std::mem::size_of::<f64>());
        let path = tile_file(&self.dir, key);
        let data = match fs::read(&path) {
            Ok(bytes) => {
                let v = self.manifest.dtype.decode(&bytes)?;
                if v.len() != n {
                    return Err(Error::Invalid(format!(
                        "{}: {} values, expected {n}",
                        path.display(),
                        v.len()
                    )));
                }
                v
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound && self.zero_missing => vec![0.0; n],
            Err(e) => return Err(e.into()),
        };
        Ok(Tile {
            data,
            dirty: false,
            _lease: lease,
        })
    }

    fn store(&self, key: TileKey, tile: &Tile) -> Result<()> {
        fs::write(tile_file(&self.dir, key), self.manifest.dtype.encode(&tile.data))?;
        Ok(())
    }

    fn get(&self, key: TileKey) -> Result<Arc<Mutex<Tile>>> {
        let mut st = self.state.lock().unwrap();
        st.tick += 1;
        let tick = st.tick;
        if let Some(entry) = st.map.get_mut(&key) {
            entry.1 = tick;
            return Ok(Arc::clone(&entry.0));
        }
        // Make room before loading so residency never exceeds capacity
        // unless every resident tile is pinned.
        while st.map.len() >= self.capacity {
            let victim = st
                .map
                .iter()
                .filter(|(_, (t, _))| Arc::strong_count(t) == 1)
                .min_by_key(|(_, (_, used))| *used)
                .map(|(k, _)| *k);
            let Some(victim) = victim else { break };
            let (t, _) = st.map.remove(&victim).unwrap();
            let t = t.lock().unwrap();
            if t.dirty {
                self.store(victim, &t)?;
            }
        }
        let tile = Arc::new(Mutex::new(self.load(key)?));
        st.map.insert(key, (Arc::clone(&tile), tick));
        Ok(tile)
    }

    fn flush(&self) -> Result<()> {
        let mut st = self.state.lock().unwrap();
        for (key, (tile, _)) in st.map.drain() {
            let t = tile.lock().unwrap();
            if t.dirty {
                self.store(key, &t)?;
            }
        }
        Ok(())
    }
}

/// Sizing and caching options for a new store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StoreOptions {
    pub tile_size: usize,
    pub dtype: Dtype,
    /// Tiles kept in core per generation.
    pub cache_tiles: usize,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self {
            tile_size: 64,
            dtype: Dtype::F32,
            cache_tiles: 4,
        }
    }
}

/// Two-generation tile store for the streaming sampler.
pub struct TileStore {
    root: PathBuf,
    manifest: StoreManifest,
    cache_tiles: usize,
    acct: Arc<MemoryAccounting>,
    read: TileCache,
    write: TileCache,
}

impl TileStore {
    /// Create an empty store at `root` (the directory is created, existing
    /// generation directories are cleared).
    pub fn create(
        root: &Path,
        canvas: CanvasSpec,
        options: StoreOptions,
        acct: &Arc<MemoryAccounting>,
    ) -> Result<Self> {
        if options.tile_size == 0 {
            return Err(Error::Invalid("tile size must be positive".into()));
        }
        fs::create_dir_all(root)?;
        for g in ["gen0", "gen1"] {
            let d = root.join(g);
            if d.exists() {
                fs::remove_dir_all(&d)?;
            }
            fs::create_dir_all(&d)?;
        }
        let manifest = StoreManifest {
            height: canvas.height,
            width: canvas.width,
            channels: canvas.channels,
            tile_size: options.tile_size,
            dtype: options.dtype,
            timestep: 0,
            generation: 0,
            pending: false,
            slots: 1,
            layout: LAYOUT.to_string(),
        };
        let store = Self::with_manifest(root, manifest, options.cache_tiles, acct);
        store.write_manifest()?;
        Ok(store)
    }

    pub fn open(root: &Path, cache_tiles: usize, acct: &Arc<MemoryAccounting>) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path)?;
        let manifest: StoreManifest = toml::from_str(&text).map_err(|e| Error::Manifest {
            path,
            message: e.to_string(),
        })?;
        Ok(Self::with_manifest(root, manifest, cache_tiles, acct))
    }

    fn with_manifest(root: &Path, manifest: StoreManifest, cache_tiles: usize, acct: &Arc<MemoryAccounting>) -> Self {
        let read = TileCache::new(root.join(manifest.read_dir()), &manifest, 1, cache_tiles, false, acct);
        let write = TileCache::new(
            root.join(manifest.write_dir()),
            &manifest,
            manifest.slots,
            cache_tiles,
            true,
            acct,
        );
        Self {
            root: root.to_path_buf(),
            manifest,
            cache_tiles,
            acct: Arc::clone(acct),
            read,
            write,
        }
    }

    fn rebuild_caches(&mut self) {
        let root = self.root.clone();
        let m = self.manifest.clone();
        *self = Self::with_manifest(&root, m, self.cache_tiles, &self.acct);
    }

    fn write_manifest(&self) -> Result<()> {
        fs::write(
            self.root.join(MANIFEST),
            toml::to_string(&self.manifest).expect("store manifest serializes"),
        )?;
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn timestep(&self) -> usize {
        self.manifest.timestep
    }

    /// Fill the read generation tile by tile and mark it as timestep `t`.
    pub fn initialize(&mut self, timestep: usize, mut fill: impl FnMut(usize, usize, Shape) -> Raster) -> Result<()> {
        let dir = self.root.join(self.manifest.read_dir());
        for key in self.manifest.tile_keys().collect::<Vec<_>>() {
            let (r, c, h, w) = self.manifest.tile_rect(key);
            let shape = Shape::new(h, w, self.manifest.channels);
            let _lease = self.acct.lease(BufferClass::Tile, shape.len() * 8);
            let tile = fill(r, c, shape);
            if tile.shape() != shape {
                return Err(Error::shape(shape, tile.shape()));
            }
            fs::write(tile_file(&dir, key), self.manifest.dtype.encode(tile.data()))?;
        }
        self.manifest.timestep = timestep;
        self.manifest.pending = false;
        self.write_manifest()?;
        self.rebuild_caches();
        Ok(())
    }

    /// Copy an `h x w` window of the read generation into core.
    pub fn read_crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Raster> {
        let m = &self.manifest;
        if row + h > m.height || col + w > m.width || h == 0 || w == 0 {
            return Err(Error::Invalid(format!(
                "crop {h}x{w} at ({row}, {col}) outside {}x{} store",
                m.height, m.width
            )));
        }
        let ch = m.channels;
        let mut out = Raster::zeros(Shape::new(h, w, ch));
        for key in m.keys_overlapping(row, col, h, w) {
            let (tr, tc, th, tw) = m.tile_rect(key);
            let tile = self.read.get(key)?;
            let tile = tile.lock().unwrap();
            let (y0, y1) = (row.max(tr), (row + h).min(tr + th));
            let (x0, x1) = (col.max(tc), (col + w).min(tc + tw));
            for y in y0..y1 {
                let src = ((y - tr) * tw + (x0 - tc)) * ch;
                let dst = out.index(y - row, x0 - col, 0);
                let n = (x1 - x0) * ch;
                out.data_mut()[dst..dst + n].copy_from_slice(&tile.data[src..src + n]);
            }
        }
        Ok(out)
    }

    /// Start accumulating the next generation with `slots` values per pixel.
    pub fn begin_step(&mut self, slots: usize) -> Result<()> {
        if self.manifest.pending {
            return Err(Error::Invalid("previous accumulation not finished".into()));
        }
        let dir = self.root.join(self.manifest.write_dir());
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        self.manifest.pending = true;
        self.manifest.slots = slots.max(1);
        self.write_manifest()?;
        self.rebuild_caches();
        Ok(())
    }

    /// Add a patch-shaped contribution with its top-left corner at `(row, col)`.
    /// `slot(y, x)` picks the accumulator slot for global pixel `(y, x)`.
    pub fn add_patch(
        &self,
        row: usize,
        col: usize,
        contribution: &Raster,
        slot: impl Fn(usize, usize) -> usize,
    ) -> Result<()> {
        let m = &self.manifest;
        if !m.pending {
            return Err(Error::Invalid("add_patch outside an accumulation step".into()));
        }
        let (h, w, ch) = (contribution.height(), contribution.width(), m.channels);
        if contribution.channels() != ch || row + h > m.height || col + w > m.width {
            return Err(Error::shape(
                format!("window inside {}", m.canvas()),
                format!("{} at ({row}, {col})", contribution.shape()),
            ));
        }
        let slots = m.slots;
        let dtype = m.dtype;
        for key in m.keys_overlapping(row, col, h, w) {
            let (tr, tc, th, tw) = m.tile_rect(key);
            let tile = self.write.get(key)?;
            let mut tile = tile.lock().unwrap();
            let (y0, y1) = (row.max(tr), (row + h).min(tr + th));
            let (x0, x1) = (col.max(tc), (col + w).min(tc + tw));
            for y in y0..y1 {
                for x in x0..x1 {
                    let s = if slots == 1 { 0 } else { slot(y, x) };
                    debug_assert!(s < slots);
                    let dst = (((y - tr) * tw + (x - tc)) * slots + s) * ch;
                    let src = contribution.pixel(y - row, x - col);
                    for (d, v) in tile.data[dst..dst + ch].iter_mut().zip(src) {
                        *d = dtype.quantize(*d + v);
                    }
                }
            }
            tile.dirty = true;
        }
        Ok(())
    }

    /// Write back pending accumulator tiles without finishing the step.
    pub fn flush(&self) -> Result<()> {
        self.write.flush()
    }

    /// Collapse accumulator slots in ascending order, swap generations and
    /// step the timestep down by one.
    pub fn finish_step(&mut self) -> Result<()> {
        if !self.manifest.pending {
            return Err(Error::Invalid("no accumulation in progress".into()));
        }
        self.write.flush()?;
        self.read.flush()?;
        let m = &self.manifest;
        let dir = self.root.join(m.write_dir());
        let (slots, ch, dtype) = (m.slots, m.channels, m.dtype);
        for key in m.tile_keys() {
            let (_, _, th, tw) = m.tile_rect(key);
            let n = th * tw * ch;
            let path = tile_file(&dir, key);
            let acc = match fs::read(&path) {
                Ok(bytes) => dtype.decode(&bytes)?,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    return Err(Error::Coverage(format!("tile {key:?} received no contributions")))
                }
                Err(e) => return Err(e.into()),
            };
            let _lease = self.acct.lease(BufferClass::Tile, (acc.len() + n) * 8);
            if acc.len() != n * slots {
                return Err(Error::Invalid(format!("{}: unexpected accumulator size", path.display())));
            }
            let plain: Vec<f64> = if slots == 1 {
                acc
            } else {
                (0..th * tw)
                    .flat_map(|p| {
                        let acc = &acc;
                        (0..ch).map(move |c| {
                            let mut sum = 0.0;
                            for s in 0..slots {
                                sum += acc[(p * slots + s) * ch + c];
                            }
                            dtype.quantize(sum)
                        })
                    })
                    .collect()
            };
            fs::write(&path, dtype.encode(&plain))?;
        }
        self.manifest.generation += 1;
        self.manifest.timestep = self.manifest.timestep.saturating_sub(1);
        self.manifest.pending = false;
        self.manifest.slots = 1;
        self.write_manifest()?;
        self.rebuild_caches();
        Ok(())
    }

    /// Read the whole read generation into one raster.
    pub fn assemble(&self) -> Result<Raster> {
        let m = &self.manifest;
        self.read_crop(0, 0, m.height, m.width)
    }
}

/// Sum two partial stores whose pending accumulations cover disjoint patch
/// sets, writing the combined store to `out`. Both must share the same read
/// generation.
pub fn merge_partials(a: &Path, b: &Path, out: &Path) -> Result<StoreManifest> {
    let read_manifest = |p: &Path| -> Result<StoreManifest> {
        let path = p.join(MANIFEST);
        let text = fs::read_to_string(&path)?;
        toml::from_str(&text).map_err(|e| Error::Manifest {
            path,
            message: e.to_string(),
        })
    };
    let ma = read_manifest(a)?;
    let mb = read_manifest(b)?;
    ma.check_compatible(&mb)?;
    if !ma.pending || !mb.pending {
        return Err(Error::Invalid("both stores must hold a pending accumulation".into()));
    }
    fs::create_dir_all(out)?;
    for g in ["gen0", "gen1"] {
        let d = out.join(g);
        if d.exists() {
            fs::remove_dir_all(&d)?;
        }
        fs::create_dir_all(&d)?;
    }
    let (rd, wd) = (ma.read_dir(), ma.write_dir());
    for key in ma.tile_keys() {
        let ra = fs::read(tile_file(&a.join(&rd), key))?;
        let rb = fs::read(tile_file(&b.join(&rd), key))?;
        if ra != rb {
            return Err(Error::Invalid(format!(
                "partial stores disagree on the current canvas at tile {key:?}"
            )));
        }
        fs::write(tile_file(&out.join(&rd), key), &ra)?;
        let load = |root: &Path| -> Result<Option<Vec<f64>>> {
            match fs::read(tile_file(&root.join(&wd), key)) {
                Ok(bytes) => Ok(Some(ma.dtype.decode(&bytes)?)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(e.into()),
            }
        };
        let merged = match (load(a)?, load(b)?) {
            (Some(x), Some(y)) => {
                if x.len() != y.len() {
                    return Err(Error::Invalid(format!("tile {key:?} sizes differ")));
                }
                Some(x.iter().zip(&y).map(|(p, q)| ma.dtype.quantize(p + q)).collect())
            }
            (Some(x), None) | (None, Some(x)) => Some(x),
            (None, None) => None,
        };
        if let Some(v) = merged {
            fs::write(tile_file(&out.join(&wd), key), ma.dtype.encode(&v))?;
        }
    }
    fs::write(out.join(MANIFEST), toml::to_string(&ma).expect("store manifest serializes"))?;
    Ok(ma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseSource;

    fn canvas() -> CanvasSpec {
        CanvasSpec::new(37, 50, 2).unwrap()
    }

    fn opts(dtype: Dtype) -> StoreOptions {
        StoreOptions {
            tile_size: 16,
            dtype,
            cache_tiles: 2,
        }
    }

    #[test]
    fn initialize_then_crop_matches_source() {
        let dir = tempfile::tempdir().unwrap();
        let acct = MemoryAccounting::new();
        let mut s = TileStore::create(dir.path(), canvas(), opts(Dtype::F64), &acct).unwrap();
        let noise = NoiseSource::new(4);
        s.initialize(10, |r, c, shape| noise.initial_window(r, c, shape)).unwrap();
        let full = noise.initial_window(0, 0, canvas().shape());
        assert_eq!(s.assemble().unwrap(), full);
        assert_eq!(s.read_crop(10, 12, 20, 30).unwrap(), full.crop(10, 12, 20, 30).unwrap());
        assert_eq!(s.timestep(), 10);
        let reopened = TileStore::open(dir.path(), 2, &acct).unwrap();
        assert_eq!(reopened.manifest(), s.manifest());
        assert_eq!(reopened.read_crop(0, 0, 5, 5).unwrap(), full.crop(0, 0, 5, 5).unwrap());
    }

    #[test]
    fn accumulate_and_finish_sums_slots() {
        let dir = tempfile::tempdir().unwrap();
        let acct = MemoryAccounting::new();
        let mut s = TileStore::create(dir.path(), canvas(), opts(Dtype::F64), &acct).unwrap();
        s.initialize(3, |_, _, shape| Raster::zeros(shape)).unwrap();
        s.begin_step(2).unwrap();
        let full = Raster::filled(canvas().shape(), 0.25);
        s.add_patch(0, 0, &full, |_, _| 0).unwrap();
        let part = Raster::filled(Shape::new(10, 10, 2), 1.0);
        s.add_patch(20, 30, &part, |_, _| 1).unwrap();
        s.finish_step().unwrap();
        assert_eq!(s.timestep(), 2);
        let out = s.assemble().unwrap();
        assert_eq!(out.get(0, 0, 0), 0.25);
        assert_eq!(out.get(25, 35, 1), 1.25);
        assert!(s.finish_step().is_err());
    }

    #[test]
    fn missing_contribution_is_a_coverage_error() {
        let dir = tempfile::tempdir().unwrap();
        let acct = MemoryAccounting::new();
        let mut s = TileStore::create(dir.path(), canvas(), opts(Dtype::F32), &acct).unwrap();
        s.initialize(1, |_, _, shape| Raster::zeros(shape)).unwrap();
        s.begin_step(1).unwrap();
        s.add_patch(0, 0, &Raster::zeros(Shape::new(4, 4, 2)), |_, _| 0).unwrap();
        assert!(matches!(s.finish_step(), Err(Error::Coverage(_))));
    }

    #[test]
    fn cache_respects_capacity_and_accounts_tiles() {
        let dir = tempfile::tempdir().unwrap();
        let acct = MemoryAccounting::new();
        let mut s = TileStore::create(dir.path(), canvas(), opts(Dtype::F32), &acct).unwrap();
        s.initialize(1, |_, _, shape| Raster::zeros(shape)).unwrap();
        for y in (0..37).step_by(4) {
            for x in (0..50).step_by(7) {
                s.read_crop(y, x, 1, 1).unwrap();
            }
        }
        // two cached 16x16x2 tiles plus one transient initialization tile at most
        let tile = 16 * 16 * 2 * 8;
        assert!(acct.peak() <= 2 * tile, "peak {}", acct.peak());
        drop(s);
        assert_eq!(acct.current(), 0);
    }

    #[test]
    fn f32_store_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let acct = MemoryAccounting::new();
        let mut s = TileStore::create(dir.path(), canvas(), opts(Dtype::F32), &acct).unwrap();
        s.initialize(1, |_, _, shape| Raster::filled(shape, 0.1)).unwrap();
        assert_eq!(s.read_crop(0, 0, 1, 1).unwrap().get(0, 0, 0), 0.1f32 as f64);
        assert_eq!(
            fs::metadata(dir.path().join("gen0/tile_0000_0000.bin")).unwrap().len(),
            16 * 16 * 2 * 4
        );
    }
}
