//! `tilefuse` command-line surface.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{DenoiserSpec, RunConfig, RunMode};
use crate::degrade::degrade;
use crate::denoiser::protocol::{self, Header, WireRequest};
use crate::field::{CoefficientTiles, NormalizationField};
use crate::geometry::{BorderPolicy, CanvasSpec, GridSpec, PatchGrid, WindowSpec};
use crate::metrics::{
    fid_patch_export, rmse_psnr, seam_index, segmentation_scores, ssim, MetricReport, MAX_8BIT, SSIM_SIGMA,
    SSIM_WINDOW,
};
use crate::mda::merge_partials;
use crate::raster::{load_png, save_png, write_grid, Dtype, Raster};
use crate::stitch::{blend_predictions, gaussian_blend_window, read_patch_list, threshold_mask, DEFAULT_THRESHOLD};
use crate::verify;

#[derive(Debug, Parser)]
#[command(name = "tilefuse", version, about = "Tiled diffusion super-resolution with variance-corrected fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Report the patch grid and normalization field for a canvas.
    Plan(PlanArgs),
    /// Run one sampling mode end to end.
    Run(RunArgs),
    /// Run self-check suites.
    Verify(VerifyArgs),
    /// Synthesize LR and condition images from an HR PNG.
    Degrade(DegradeArgs),
    /// Blend per-patch probability maps into one scene.
    Stitch(StitchArgs),
    /// Fidelity, structure, seam and segmentation reports; FID crop export.
    Metrics(MetricsArgs),
    /// Sum two partial tile stores covering disjoint patch sets.
    MergePartials(MergeArgs),
    /// Zero-noise denoiser speaking the subprocess protocol on stdin/stdout.
    #[command(hide = true)]
    ServeEchoZero(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Patch size (square unless --patch-w is given).
    #[arg(long, default_value_t = 32)]
    pub patch: usize,
    #[arg(long)]
    pub patch_w: Option<usize>,
    #[arg(long, default_value_t = 16)]
    pub stride: usize,
    #[arg(long)]
    pub stride_x: Option<usize>,
    #[arg(long, default_value = "clamp-last")]
    pub border: BorderPolicy,
}

impl GridArgs {
    fn spec(&self) -> GridSpec {
        GridSpec {
            patch_h: self.patch,
            patch_w: self.patch_w.unwrap_or(self.patch),
            stride_y: self.stride,
            stride_x: self.stride_x.unwrap_or(self.stride),
            border_policy: self.border,
        }
    }
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Canvas as HxW or HxWxC.
    #[arg(long)]
    pub canvas: String,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long, default_value = "constant")]
    pub window: String,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Also write the W, S and lambda maps as flat grids with this prefix.
    #[arg(long)]
    pub dump: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Key-value run configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<RunMode>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub factor: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub border: Option<BorderPolicy>,
    #[arg(long)]
    pub window: Option<String>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub beta_start: Option<f64>,
    #[arg(long)]
    pub beta_end: Option<f64>,
    /// zero | exact | prior[:texture,offset] | external:<command>
    #[arg(long)]
    pub denoiser: Option<DenoiserSpec>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub tile_size: Option<usize>,
    #[arg(long)]
    pub dtype: Option<Dtype>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Sum contributions in arrival order instead of ascending patch order.
    #[arg(long)]
    pub nondeterministic: bool,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    /// Shuffle the per-step patch visiting order with this seed.
    #[arg(long)]
    pub order_seed: Option<u64>,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = &self.$flag { c.$field = v.clone(); })*
            };
        }
        set!(mode => mode, factor => factor, border => border_policy, window => window,
             steps => steps, beta_start => beta_start, beta_end => beta_end, denoiser => denoiser,
             seed => seed, store => store, tile_size => tile_size, dtype => dtype,
             parallelism => parallelism, output => output, timeout_secs => timeout_secs);
        if let Some(p) = &self.input {
            c.input = Some(p.clone());
        }
        if let Some(s) = self.sigma {
            c.window_sigma = Some(s);
        }
        if let Some(p) = self.patch {
            c.patch_h = p;
            c.patch_w = p;
        }
        if let Some(s) = self.stride {
            c.stride_y = s;
            c.stride_x = s;
        }
        if self.order_seed.is_some() {
            c.order_seed = self.order_seed;
        }
        if self.nondeterministic {
            c.deterministic = false;
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Equivalence,
    Variance,
    Periodicity,
    Memory,
    All,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub suite: Suite,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances for the equivalence suite.
    #[arg(long, default_value_t = 10)]
    pub cases: usize,
    /// Reverse steps per equivalence instance.
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Monte-Carlo draws for the variance suite.
    #[arg(long, default_value_t = 10_000)]
    pub draws: usize,
    /// Scratch directory for tile stores (default: a temporary directory).
    #[arg(long)]
    pub scratch: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = crate::degrade::DEFAULT_FACTOR)]
    pub factor: usize,
    #[arg(long)]
    pub lr: PathBuf,
    #[arg(long)]
    pub condition: PathBuf,
}

#[derive(Debug, Args)]
pub struct StitchArgs {
    /// Patch list (TOML with height, width and [[patch]] row/col/grid entries).
    #[arg(long)]
    pub patches: PathBuf,
    /// Blend window sigma in pixels (default: a quarter of the patch size).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Output flat-grid base path for the blended probabilities.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Write the thresholded mask of the first class as a PNG.
    #[arg(long)]
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub candidate: Option<PathBuf>,
    /// Patch size of the grid whose boundaries are checked for seams.
    #[arg(long)]
    pub seam_patch: Option<usize>,
    #[arg(long)]
    pub pred_mask: Option<PathBuf>,
    #[arg(long)]
    pub truth_mask: Option<PathBuf>,
    /// Export 299x299 crops of the candidate (or reference) here.
    #[arg(long)]
    pub fid_export: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    BadMagic,
    BadShape,
    Nan,
    Hang,
    Exit,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Misbehave on the first request, for exercising client error paths.
    #[arg(long, value_enum)]
    pub fault: Option<Fault>,
}

fn parse_canvas(s: &str) -> anyhow::Result<CanvasSpec> {
    let parts: Vec<usize> = s
        .split('x')
        .map(str::parse)
        .collect::<Result<_, _>>()
        .with_context(|| format!("canvas `{s}` is not HxW or HxWxC"))?;
    let canvas = match parts[..] {
        [h, w] => CanvasSpec::new(h, w, 1)?,
        [h, w, c] => CanvasSpec::new(h, w, c)?,
        _ => bail!("canvas `{s}` is not HxW or HxWxC"),
    };
    Ok(canvas)
}

fn plan(args: &PlanArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let canvas = parse_canvas(&args.canvas)?;
    let grid = PatchGrid::new(canvas, args.grid.spec()).context("plan: grid")?;
    let window = WindowSpec::parse(&args.window, args.sigma)?.build(grid.patch_h(), grid.patch_w())?;
    let field = NormalizationField::compute(&grid, &window).context("plan: normalization field")?;
    let ext = field.extrema();
    writeln!(out, "canvas: {}", canvas.shape())?;
    writeln!(
        out,
        "patch: {}x{} stride {}x{} ({})",
        grid.patch_h(),
        grid.patch_w(),
        grid.spec().stride_y,
        grid.spec().stride_x,
        grid.spec().border_policy
    )?;
    writeln!(out, "window: {}", window.spec().kind_name())?;
    writeln!(out, "patches: {}", grid.len())?;
    writeln!(out, "grid: {} rows x {} cols", grid.row_origins().len(), grid.col_origins().len())?;
    writeln!(out, "max_cover: {}", grid.max_cover())?;
    writeln!(out, "w_min: {}", ext.w.min)?;
    writeln!(out, "w_max: {}", ext.w.max)?;
    writeln!(out, "s_min: {}", ext.s.min)?;
    writeln!(out, "s_max: {}", ext.s.max)?;
    writeln!(out, "lambda_min: {}", ext.lambda.min)?;
    writeln!(out, "lambda_max: {}", ext.lambda.max)?;
    match CoefficientTiles::precompute(&grid, &window) {
        Ok(t) => writeln!(out, "coefficient_classes: {} ({} bytes)", t.class_count(), t.bytes())?,
        Err(_) => writeln!(out, "coefficient_classes: none (grid not periodic)")?,
    }
    if let Some(prefix) = &args.dump {
        for (name, r) in [("w", field.w_raster()), ("s", field.s_raster()), ("lambda", field.lambda_raster())] {
            let base = prefix.with_file_name(format!(
                "{}_{name}",
                prefix.file_name().and_then(|s| s.to_str()).unwrap_or("plan")
            ));
            write_grid(&base, &r, Dtype::F64, BTreeMap::new())?;
        }
    }
    Ok(())
}

fn run(args: &RunArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = args.resolve().context("run: configuration")?;
    let result = crate::pipeline::execute(&cfg).with_context(|| format!("run ({} mode)", cfg.mode))?;
    let report = MetricReport {
        rmse: Some(result.fidelity.rmse),
        psnr: Some(result.fidelity.psnr),
        seam_index: Some(result.seam_index),
        ..Default::default()
    };
    if args.json {
        writeln!(out, "{}", report.to_json())?;
        return Ok(());
    }
    writeln!(out, "mode: {}", cfg.mode)?;
    writeln!(out, "patches: {}", result.patches)?;
    write!(out, "{report}")?;
    if let Some(m) = result.memory {
        write!(out, "{m}")?;
    }
    for f in &result.files {
        writeln!(out, "wrote: {}", f.display())?;
    }
    Ok(())
}

fn verify_cmd(args: &VerifyArgs, out: &mut dyn Write) -> anyhow::Result<bool> {
    let tmp;
    let scratch: &Path = match &args.scratch {
        Some(p) => p,
        None => {
            tmp = tempfile_dir()?;
            &tmp.0
        }
    };
    let wants = |s| args.suite == s || args.suite == Suite::All;
    let mut reports = Vec::new();
    if wants(Suite::Equivalence) {
        reports.push(verify::equivalence_suite(args.seed, args.cases, args.steps, scratch).context("verify: equivalence")?);
    }
    if wants(Suite::Variance) {
        reports.push(verify::variance_suite(args.seed, args.draws).context("verify: variance")?);
    }
    if wants(Suite::Periodicity) {
        reports.push(verify::periodicity_suite().context("verify: periodicity")?);
    }
    if wants(Suite::Memory) {
        reports.push(verify::memory_suite(&[128, 256, 512], scratch).context("verify: memory")?);
    }
    let mut ok = true;
    for r in &reports {
        write!(out, "{r}")?;
        ok &= r.passed;
    }
    Ok(ok)
}

/// Scratch directory removed on drop.
struct ScratchDir(PathBuf);

impl Drop for ScratchDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn tempfile_dir() -> anyhow::Result<ScratchDir> {
    let dir = std::env::temp_dir().join(format!("tilefuse-verify-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(ScratchDir(dir))
}

fn degrade_cmd(args: &DegradeArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let hr = load_png(&args.input).context("degrade: reading input")?;
    let d = degrade(&hr, args.factor).context("degrade")?;
    save_png(&args.lr, &d.lr)?;
    save_png(&args.condition, &d.condition)?;
    writeln!(out, "lr: {}x{} -> {}", d.lr.height(), d.lr.width(), args.lr.display())?;
    writeln!(
        out,
        "condition: {}x{} -> {}",
        d.condition.height(),
        d.condition.width(),
        args.condition.display()
    )?;
    Ok(())
}

fn stitch_cmd(args: &StitchArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let (h, w, patches) = read_patch_list(&args.patches).context("stitch: reading patch list")?;
    let size = patches
        .first()
        .map(|p| p.probabilities.height())
        .context("stitch: empty patch list")?;
    let window = gaussian_blend_window(size, args.sigma.unwrap_or(size as f64 / 4.0))?;
    let blended = blend_predictions(&patches, h, w, &window).context("stitch: blending")?;
    write_grid(&args.output, &blended, Dtype::F32, BTreeMap::new())?;
    writeln!(out, "patches: {}", patches.len())?;
    writeln!(out, "output: {}", args.output.display())?;
    if let Some(mask_path) = &args.mask {
        let first = Raster::from_fn(
            crate::raster::Shape::new(h, w, 1),
            |y, x, _| blended.get(y, x, 0),
        );
        let mask = threshold_mask(&first, args.threshold).map(|v| v * 255.0);
        save_png(mask_path, &mask)?;
        writeln!(out, "mask: {} (threshold {})", mask_path.display(), args.threshold)?;
    }
    Ok(())
}

fn load_mask(p: &Path) -> anyhow::Result<Raster> {
    let img = load_png(p).with_context(|| format!("metrics: reading mask {}", p.display()))?;
    Ok(img.map(|v| if v >= 128.0 { 1.0 } else { 0.0 }))
}

fn metrics_cmd(args: &MetricsArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut report = MetricReport::default();
    let reference = args.reference.as_deref().map(load_png).transpose()?;
    let candidate = args.candidate.as_deref().map(load_png).transpose()?;
    if let (Some(r), Some(c)) = (&reference, &candidate) {
        let f = rmse_psnr(r, c, MAX_8BIT).context("metrics: fidelity")?;
        report.rmse = Some(f.rmse);
        report.psnr = Some(f.psnr);
        report.ssim = Some(ssim(r, c, SSIM_WINDOW, SSIM_SIGMA, MAX_8BIT).context("metrics: ssim")?);
    }
    if let Some(p) = args.seam_patch {
        let img = candidate.as_ref().or(reference.as_ref()).context("metrics: seam index needs an image")?;
        let canvas = CanvasSpec::new(img.height(), img.width(), img.channels())?;
        let grid = PatchGrid::new(canvas, GridSpec::square(p, p, BorderPolicy::ClampLast))?;
        report.seam_index = Some(seam_index(img, &grid).context("metrics: seam index")?);
    }
    match (&args.pred_mask, &args.truth_mask) {
        (Some(p), Some(t)) => {
            report.segmentation = Some(segmentation_scores(&load_mask(p)?, &load_mask(t)?)?);
        }
        (None, None) => {}
        _ => bail!("metrics: --pred-mask and --truth-mask go together"),
    }
    if let Some(dir) = &args.fid_export {
        let img = candidate.as_ref().or(reference.as_ref()).context("metrics: FID export needs an image")?;
        let e = fid_patch_export(img, dir).context("metrics: FID export")?;
        report.fid_patches = Some((e.patch.len(), dir.clone()));
    }
    if args.json {
        writeln!(out, "{}", report.to_json())?;
    } else {
        write!(out, "{report}")?;
    }
    Ok(())
}

fn zero_response(req: &WireRequest) -> Vec<u8> {
    protocol::encode_response(&Raster::zeros(req.shape()))
}

fn serve(args: &ServeArgs) -> anyhow::Result<()> {
    let stdin = io::stdin().lock();
    let stdout = io::stdout().lock();
    let mut first = true;
    let fault = args.fault;
    protocol::serve(stdin, stdout, move |req| {
        let this = std::mem::replace(&mut first, false);
        match (fault, this) {
            (Some(Fault::BadMagic), true) => {
                let mut b = zero_response(req);
                b[..4].copy_from_slice(b"XXXX");
                b
            }
            (Some(Fault::BadShape), true) => {
                let s = req.shape();
                let mut b = Header::new(s.height + 1, s.width).encode().to_vec();
                b.extend(std::iter::repeat_n(0u8, 4 * (s.height + 1) * s.width * s.channels));
                b
            }
            (Some(Fault::Nan), true) => {
                protocol::encode_response(&Raster::filled(req.shape(), f64::NAN))
            }
            (Some(Fault::Hang), true) => loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            },
            (Some(Fault::Exit), true) => std::process::exit(3),
            _ => zero_response(req),
        }
    })?;
    Ok(())
}

/// Dispatch a parsed command; `Ok(false)` means a check ran and failed.
pub fn dispatch(cli: &Cli, out: &mut dyn Write) -> anyhow::Result<bool> {
    match &cli.command {
        Command::Plan(a) => plan(a, out)?,
        Command::Run(a) => run(a, out)?,
        Command::Verify(a) => return verify_cmd(a, out),
        Command::Degrade(a) => degrade_cmd(a, out)?,
        Command::Stitch(a) => stitch_cmd(a, out)?,
        Command::Metrics(a) => metrics_cmd(a, out)?,
        Command::MergePartials(a) => {
            let m = merge_partials(&a.a, &a.b, &a.output).context("merge-partials")?;
            writeln!(out, "merged: {} (timestep {}, generation {})", a.output.display(), m.timestep, m.generation)?;
        }
        Command::ServeEchoZero(a) => serve(a)?,
    }
    Ok(true)
}

/// Parse `argv`, run, and map the outcome to an exit status.
pub fn main_with_args<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match dispatch(&cli, &mut out) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
