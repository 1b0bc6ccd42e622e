//! Run configuration: a flat key-value TOML document that fully determines
//! a run. Every run writes its resolved configuration next to the output so
//! the run can be repeated exactly.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, ExactNoiseOracle, ExternalConfig, ExternalDenoiser, PriorDenoiser, ZeroDenoiser};
use crate::error::{Error, Result};
use crate::geometry::{BorderPolicy, CanvasSpec, GridSpec, PatchGrid, WeightWindow, WindowSpec};
use crate::mda::{PatchOrder, StoreOptions, StreamConfig};
use crate::raster::{Dtype, Raster};
use crate::schedule::{NoiseSchedule, ScheduleSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Independent,
    Naive,
    Corrected,
    Mda,
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(RunMode::Independent),
            "naive" => Ok(RunMode::Naive),
            "corrected" => Ok(RunMode::Corrected),
            "mda" => Ok(RunMode::Mda),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected independent, naive, corrected or mda)"
            ))),
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::Independent => "independent",
            RunMode::Naive => "naive",
            RunMode::Corrected => "corrected",
            RunMode::Mda => "mda",
        })
    }
}

/// Which noise predictor to use. Text forms: `zero`, `exact`,
/// `prior[:texture,offset]`, `external:<command line>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DenoiserSpec {
    Zero,
    /// Exact-noise oracle against the high-resolution input.
    Exact,
    Prior { texture_std: f64, offset_std: f64 },
    External(String),
}

impl DenoiserSpec {
    pub const DEFAULT_PRIOR: (f64, f64) = (0.3, 0.3);
}

impl FromStr for DenoiserSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, rest) = match s.split_once(':') {
            Some((h, r)) => (h, Some(r)),
            None => (s, None),
        };
        match (head, rest) {
            ("zero", None) => Ok(Self::Zero),
            ("exact", None) => Ok(Self::Exact),
            ("prior", None) => Ok(Self::Prior {
                texture_std: Self::DEFAULT_PRIOR.0,
                offset_std: Self::DEFAULT_PRIOR.1,
            }),
            ("prior", Some(args)) => {
                let parsed: Vec<f64> = args
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Config(format!("prior denoiser arguments `{args}`: {e}")))?;
                match parsed[..] {
                    [t, o] if t > 0.0 && o >= 0.0 => Ok(Self::Prior {
                        texture_std: t,
                        offset_std: o,
                    }),
                    _ => Err(Error::Config(format!(
                        "prior denoiser expects `prior:<texture>,<offset>` with texture > 0, got `{args}`"
                    ))),
                }
            }
            ("external", Some(cmd)) if !cmd.trim().is_empty() => Ok(Self::External(cmd.trim().to_string())),
            _ => Err(Error::Config(format!(
                "unknown denoiser `{s}` (expected zero, exact, prior[:t,o] or external:<cmd>)"
            ))),
        }
    }
}

impl TryFrom<String> for DenoiserSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DenoiserSpec> for String {
    fn from(d: DenoiserSpec) -> String {
        d.to_string()
    }
}

impl fmt::Display for DenoiserSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Zero => f.write_str("zero"),
            Self::Exact => f.write_str("exact"),
            Self::Prior {
                texture_std,
                offset_std,
            } => write!(f, "prior:{texture_std},{offset_std}"),
            Self::External(cmd) => write!(f, "external:{cmd}"),
        }
    }
}

fn default_factor() -> usize {
    crate::degrade::DEFAULT_FACTOR
}
fn default_patch() -> usize {
    32
}
fn default_stride() -> usize {
    16
}
fn default_window() -> String {
    "gaussian".into()
}
fn default_steps() -> usize {
    ScheduleSpec::TRAINED.steps
}
fn default_beta_start() -> f64 {
    ScheduleSpec::TRAINED.beta_start
}
fn default_beta_end() -> f64 {
    ScheduleSpec::TRAINED.beta_end
}
fn default_denoiser() -> DenoiserSpec {
    DenoiserSpec::Exact
}
fn default_mode() -> RunMode {
    RunMode::Mda
}
fn default_store() -> PathBuf {
    PathBuf::from("tilefuse-store")
}
fn default_tile() -> usize {
    64
}
fn default_cache() -> usize {
    4
}
fn default_one() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_output() -> PathBuf {
    PathBuf::from("tilefuse-out.png")
}
fn default_timeout() -> u64 {
    ExternalConfig::DEFAULT_TIMEOUT.as_secs()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// High-resolution PNG; absent means the bundled toy scene.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default = "default_factor")]
    pub factor: usize,
    #[serde(default = "default_patch")]
    pub patch_h: usize,
    #[serde(default = "default_patch")]
    pub patch_w: usize,
    #[serde(default = "default_stride")]
    pub stride_y: usize,
    #[serde(default = "default_stride")]
    pub stride_x: usize,
    #[serde(default)]
    pub border_policy: BorderPolicy,
    #[serde(default = "default_window")]
    pub window: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_sigma: Option<f64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    #[serde(default = "default_denoiser")]
    pub denoiser: DenoiserSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: RunMode,
    #[serde(default = "default_store")]
    pub store: PathBuf,
    #[serde(default = "default_tile")]
    pub tile_size: usize,
    #[serde(default)]
    pub dtype: Dtype,
    #[serde(default = "default_cache")]
    pub cache_tiles: usize,
    #[serde(default = "default_one")]
    pub parallelism: usize,
    #[serde(default = "default_true")]
    pub deterministic: bool,
    /// Visit patches in a seeded random order each step instead of ascending.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order_seed: Option<u64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Per-request limit for external denoisers, seconds.
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_one")]
    pub denoiser_processes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Resolvable paths and consistent parameters.
    pub fn validate(&self) -> Result<()> {
        if let Some(input) = &self.input {
            if !input.is_file() {
                return Err(Error::Config(format!("input {} does not exist", input.display())));
            }
        }
        if self.factor < 2 {
            return Err(Error::Config(format!("factor must be at least 2, got {}", self.factor)));
        }
        if self.tile_size == 0 || self.parallelism == 0 {
            return Err(Error::Config("tile_size and parallelism must be positive".into()));
        }
        self.window_spec()?;
        self.schedule_spec().build()?;
        if let Some(parent) = self.output.parent().filter(|p| !p.as_os_str().is_empty()) {
            if parent.exists() && !parent.is_dir() {
                return Err(Error::Config(format!("output parent {} is not a directory", parent.display())));
            }
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            patch_h: self.patch_h,
            patch_w: self.patch_w,
            stride_y: self.stride_y,
            stride_x: self.stride_x,
            border_policy: self.border_policy,
        }
    }

    /// Grid actually sampled: independent mode tiles without overlap.
    pub fn effective_grid(&self, canvas: CanvasSpec) -> Result<PatchGrid> {
        let mut spec = self.grid_spec();
        if self.mode == RunMode::Independent {
            spec.stride_y = spec.patch_h;
            spec.stride_x = spec.patch_w;
        }
        PatchGrid::new(canvas, spec)
    }

    pub fn window_spec(&self) -> Result<WindowSpec> {
        WindowSpec::parse(&self.window, self.window_sigma)
    }

    pub fn window(&self) -> Result<WeightWindow> {
        self.window_spec()?.build(self.patch_h, self.patch_w)
    }

    pub fn schedule_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            steps: self.steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.schedule_spec().build()
    }

    /// Instantiate the denoiser; `truth` is the latent-range ground truth
    /// needed by the exact oracle.
    pub fn build_denoiser(&self, grid: &PatchGrid, truth: &Raster) -> Result<Box<dyn Denoiser>> {
        Ok(match &self.denoiser {
            DenoiserSpec::Zero => Box::new(ZeroDenoiser),
            DenoiserSpec::Exact => Box::new(ExactNoiseOracle::from_canvas(truth, grid)?),
            DenoiserSpec::Prior {
                texture_std,
                offset_std,
            } => Box::new(PriorDenoiser::new(*texture_std, *offset_std)),
            DenoiserSpec::External(cmd) => {
                let mut cfg = ExternalConfig::from_command_line(cmd)?;
                cfg.timeout = Duration::from_secs(self.timeout_secs);
                cfg.channels = self.denoiser_processes.max(1);
                Box::new(ExternalDenoiser::spawn(cfg)?)
            }
        })
    }

    pub fn stream_config(&self) -> StreamConfig {
        let mut cfg = StreamConfig::new(&self.store);
        cfg.store = StoreOptions {
            tile_size: self.tile_size,
            dtype: self.dtype,
            cache_tiles: self.cache_tiles,
        };
        cfg.parallelism = self.parallelism;
        cfg.deterministic = self.deterministic;
        if let Some(seed) = self.order_seed {
            cfg.order = PatchOrder::Shuffled(seed);
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let c = RunConfig::default();
        assert_eq!(c.mode, RunMode::Mda);
        assert_eq!(c.steps, 2000);
        assert_eq!(c.denoiser, DenoiserSpec::Exact);
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn parses_key_values() {
        let c = RunConfig::from_toml(
            "mode = \"independent\"\npatch_h = 16\npatch_w = 16\ndenoiser = \"prior:0.5,0.2\"\ndtype = \"f64\"\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(c.mode, RunMode::Independent);
        assert_eq!(
            c.denoiser,
            DenoiserSpec::Prior {
                texture_std: 0.5,
                offset_std: 0.2
            }
        );
        assert_eq!(c.dtype, Dtype::F64);
        assert!(RunConfig::from_toml("mode = \"bogus\"").is_err());
        assert!(RunConfig::from_toml("unknown_key = 1").is_err());
    }

    #[test]
    fn denoiser_spec_text_forms() {
        for s in ["zero", "exact", "prior:0.3,0.3", "external:python3 serve.py --fast"] {
            assert_eq!(s.parse::<DenoiserSpec>().unwrap().to_string(), s);
        }
        assert!("prior:1".parse::<DenoiserSpec>().is_err());
        assert!("external:".parse::<DenoiserSpec>().is_err());
        assert!("gan".parse::<DenoiserSpec>().is_err());
    }

    #[test]
    fn validation_catches_missing_input() {
        let c = RunConfig {
            input: Some(PathBuf::from("/definitely/not/here.png")),
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn independent_mode_drops_overlap() {
        let c = RunConfig {
            mode: RunMode::Independent,
            ..RunConfig::default()
        };
        let g = c.effective_grid(CanvasSpec::new(96, 96, 3).unwrap()).unwrap();
        assert!(g.is_non_overlapping());
        assert_eq!(g.len(), 9);
    }
}
