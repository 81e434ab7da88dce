//! The `gift` command line.
//!
//! Exit codes: 0 success, 1 I/O or file-content failure, 2 usage error,
//! 3 numerical divergence.

use std::ffi::OsString;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gift_core::grid::make_geometry;
use gift_core::optimizer::{reconstruct, ReconConfig, ReconError, ReconOutput};
use gift_core::projector::{fbp_windowed, radon_forward, FilterWindow};
use gift_core::CoreError;
use thiserror::Error;

use crate::bench::{self, BenchPlan, Method, PhantomKind, PlanError};
use crate::formats::{self, FormatError, MetricsRow, SinogramFile};
use crate::noise::{add_noise, NoiseModel};
use crate::phantom::MIN_PHANTOM_SIZE;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "gift", version, about = "Sparse-view CT reconstruction with Gaussian clouds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phantom volume.
    Phantom(PhantomArgs),
    /// Simulate a parallel-beam sinogram from a volume.
    Project(ProjectArgs),
    /// Reconstruct a volume from a sinogram.
    Reconstruct(ReconstructArgs),
    /// Score a reconstruction against a reference and append a CSV row.
    Eval(EvalArgs),
    /// Sweep methods over view counts.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    SheppLogan,
    Lesion,
}

impl From<KindArg> for PhantomKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::SheppLogan => PhantomKind::SheppLogan,
            KindArg::Lesion => PhantomKind::Lesion,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Fbp,
    Gift,
}

#[derive(Debug, Clone, Copy, ValueEnum, Default)]
pub enum FilterArg {
    #[default]
    RamLak,
    Hann,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, value_enum, default_value = "shepp-logan")]
    pub kind: KindArg,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub views: usize,
    /// none, gaussian:SIGMA or poisson:I0[:SCALE]
    #[arg(long, default_value = "none")]
    pub noise: NoiseModel,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "gift")]
    pub method: MethodArg,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub gaussians: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Ramp filter window for FBP and for the GIFT initialization.
    #[arg(long, value_enum, default_value = "ram-lak")]
    pub filter: FilterArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace CSV, one row per iteration.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub recon: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long = "out-csv")]
    pub out_csv: PathBuf,
    /// Label for the method column.
    #[arg(long, default_value = "unknown")]
    pub method: String,
    /// Label for the phantom column; defaults to the reference file stem.
    #[arg(long)]
    pub phantom: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub views: usize,
    #[arg(long, default_value_t = 0)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// key=value plan file; flags given on the command line override it.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub phantom: Option<KindArg>,
    #[arg(long)]
    pub size: Option<usize>,
    /// Comma-separated view counts.
    #[arg(long)]
    pub views: Option<String>,
    /// Comma-separated subset of fbp,gift.
    #[arg(long)]
    pub methods: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub gaussians: Option<usize>,
    #[arg(long)]
    pub noise: Option<NoiseModel>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run independent entries concurrently.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{0}")]
    Io(String),
    #[error("optimization diverged at iteration {iteration}")]
    Diverged { iteration: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Format(_) | CliError::Io(_) => EXIT_IO,
            CliError::Diverged { .. } => EXIT_DIVERGED,
        }
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Phantom(a) => cmd_phantom(&a),
        Command::Project(a) => cmd_project(&a),
        Command::Reconstruct(a) => cmd_reconstruct(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Bench(a) => cmd_bench(&a),
    }
}

pub fn cmd_phantom(a: &PhantomArgs) -> Result<(), CliError> {
    if a.size < MIN_PHANTOM_SIZE {
        return Err(CliError::Usage(format!("--size must be at least {MIN_PHANTOM_SIZE}, got {}", a.size)));
    }
    let grid = PhantomKind::from(a.kind).generate(a.size, a.seed).map_err(usage)?;
    formats::write_volume(&a.out, &grid)?;
    Ok(())
}

pub fn cmd_project(a: &ProjectArgs) -> Result<(), CliError> {
    if a.views == 0 {
        return Err(CliError::Usage("--views must be at least 1".into()));
    }
    let grid = formats::read_volume(&a.input)?;
    let geometry = make_geometry(a.views, [grid.height(), grid.width()]).map_err(usage)?;
    let clean = radon_forward(&grid, &geometry).map_err(usage)?;
    let sinogram = add_noise(&clean, a.noise, a.seed).map_err(usage)?;
    formats::write_sinogram(&a.out, &SinogramFile { sinogram, geometry })?;
    Ok(())
}

fn recon_config(iters: Option<usize>, lr: Option<f64>, gaussians: Option<usize>, seed: u64) -> Result<ReconConfig, CliError> {
    let mut cfg = ReconConfig { seed, ..ReconConfig::default() };
    if let Some(n) = iters {
        cfg.max_iters = n;
    }
    if let Some(lr) = lr {
        cfg.lr = lr;
    }
    if gaussians.is_some() {
        cfg.gaussian_count = gaussians;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn window(f: FilterArg) -> FilterWindow {
    match f {
        FilterArg::RamLak => FilterWindow::RamLak,
        FilterArg::Hann => FilterWindow::Hann,
    }
}

fn core_err(e: CoreError) -> CliError {
    match e {
        CoreError::NonFiniteGradient { iteration } => CliError::Diverged { iteration },
        other => usage(other),
    }
}

pub fn cmd_reconstruct(a: &ReconstructArgs) -> Result<(), CliError> {
    let SinogramFile { sinogram, geometry } = formats::read_sinogram(&a.input)?;
    match a.method {
        MethodArg::Fbp => {
            let volume = fbp_windowed(&sinogram, &geometry, window(a.filter)).map_err(core_err)?;
            formats::write_volume(&a.out, &volume)?;
            Ok(())
        }
        MethodArg::Gift => {
            let cfg = recon_config(a.iters, a.lr, a.gaussians, a.seed)?;
            let start = Instant::now();
            let mut stderr = std::io::stderr();
            let mut hook = |p: &gift_core::optimizer::Progress<'_>| {
                if p.is_snapshot {
                    let t = p.point;
                    let _ = writeln!(
                        stderr,
                        "iter {:>5}  loss {:.6}  l1 {:.6}  ssim {:.6}  tv {:.6}  {:.1}s",
                        t.iteration,
                        t.loss,
                        t.l1,
                        t.ssim,
                        t.tv,
                        start.elapsed().as_secs_f64()
                    );
                }
                ControlFlow::Continue(())
            };
            let result = if matches!(a.filter, FilterArg::RamLak) {
                reconstruct(&sinogram, &geometry, &cfg, &mut hook)
            } else {
                gift_core::optimizer::init_cloud_windowed(&sinogram, &geometry, &cfg, window(a.filter))
                    .map_err(ReconError::from)
                    .and_then(|cloud| gift_core::optimizer::reconstruct_from(&sinogram, &geometry, &cfg, cloud, &mut hook))
            };
            match result {
                Ok(out) => write_recon(a, &out),
                Err(ReconError::Invalid(e)) => Err(core_err(e)),
                Err(ReconError::Diverged { iteration, partial }) => {
                    if let Some(out) = partial {
                        write_recon(a, &out)?;
                        eprintln!("wrote best-so-far volume from iteration {}", out.best_iteration);
                    }
                    Err(CliError::Diverged { iteration })
                }
            }
        }
    }
}

fn write_recon(a: &ReconstructArgs, out: &ReconOutput) -> Result<(), CliError> {
    formats::write_volume(&a.out, &out.volume)?;
    if let Some(trace) = &a.trace {
        formats::write_trace_csv(trace, &out.trace)?;
    }
    Ok(())
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let recon = formats::read_volume(&a.recon)?;
    let reference = formats::read_volume(&a.reference)?;
    if recon.dims() != reference.dims() {
        return Err(CliError::Usage(format!(
            "shape mismatch: recon {:?} vs reference {:?}",
            recon.dims(),
            reference.dims()
        )));
    }
    let (psnr_db, ssim) = bench::score(&recon, &reference).map_err(usage)?;
    let row = MetricsRow {
        method: a.method.clone(),
        phantom: a.phantom.clone().unwrap_or_else(|| file_stem(&a.reference)),
        views: a.views,
        psnr_db,
        ssim,
        iters: a.iters,
        wall_seconds: 0.0,
        seed: a.seed,
    };
    formats::append_metrics_csv(&a.out_csv, std::slice::from_ref(&row))?;
    println!("psnr_db {psnr_db}  ssim {ssim}");
    Ok(())
}

pub fn bench_plan(a: &BenchArgs) -> Result<BenchPlan, CliError> {
    let mut plan = match &a.plan {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            BenchPlan::parse(&text)?
        }
        None => BenchPlan::default(),
    };
    if let Some(k) = a.phantom {
        plan.phantom = k.into();
    }
    if let Some(s) = a.size {
        plan.size = s;
    }
    if let Some(v) = &a.views {
        plan.set("views", v)?;
    }
    if let Some(m) = &a.methods {
        plan.set("methods", m)?;
    }
    if let Some(s) = &a.seeds {
        plan.set("seeds", s)?;
    }
    if let Some(n) = a.iters {
        plan.recon.max_iters = n;
    }
    if let Some(lr) = a.lr {
        plan.recon.lr = lr;
    }
    if a.gaussians.is_some() {
        plan.recon.gaussian_count = a.gaussians;
    }
    if let Some(n) = a.noise {
        plan.noise = n;
    }
    if let Some(o) = &a.out {
        plan.out_dir = o.clone();
    }
    plan.parallel |= a.parallel;
    plan.validate()?;
    if plan.size < MIN_PHANTOM_SIZE {
        return Err(CliError::Usage(format!("size must be at least {MIN_PHANTOM_SIZE}, got {}", plan.size)));
    }
    plan.recon.validate().map_err(usage)?;
    Ok(plan)
}

pub fn cmd_bench(a: &BenchArgs) -> Result<(), CliError> {
    let plan = bench_plan(a)?;
    let outcomes = bench::run_bench(&plan, |o| match &o.result {
        Ok(row) => eprintln!(
            "{} {:>4} views seed {}: psnr {:.2} dB  ssim {:.4}  {:.1}s",
            row.method, row.views, row.seed, row.psnr_db, row.ssim, row.wall_seconds
        ),
        Err(e) => eprintln!("{} {:>4} views seed {}: failed: {e}", o.entry.method, o.entry.views, o.entry.seed),
    })?;
    print!("{}", bench::format_summary(&bench::summarize(&outcomes)));
    if outcomes.iter().any(|o| o.result.is_ok()) {
        Ok(())
    } else {
        Err(CliError::Io("every bench entry failed".into()))
    }
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Fbp => Method::Fbp,
            MethodArg::Gift => Method::Gift,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_subcommands() {
        let cli = Cli::try_parse_from(["gift", "phantom", "--size", "64", "--out", "p.vol"]).unwrap();
        assert!(matches!(cli.command, Command::Phantom(PhantomArgs { size: 64, .. })));
        let cli = Cli::try_parse_from(["gift", "project", "--in", "a", "--views", "60", "--noise", "gaussian:0.1", "--out", "b"]).unwrap();
        match cli.command {
            Command::Project(p) => assert_eq!(p.noise, NoiseModel::Gaussian { sigma: 0.1 }),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["gift", "phantom", "--size", "64"]), EXIT_USAGE);
        assert_eq!(run(["gift", "project", "--in", "a", "--views", "1", "--noise", "bogus", "--out", "b"]), EXIT_USAGE);
    }

    #[test]
    fn small_phantom_names_minimum() {
        let err = cmd_phantom(&PhantomArgs { kind: KindArg::SheppLogan, size: 8, seed: 0, out: "x".into() }).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_USAGE);
        assert!(err.to_string().contains("16"));
    }

    #[test]
    fn bench_flags_override_plan() {
        let dir = tempfile::tempdir().unwrap();
        let plan_path = dir.path().join("plan.txt");
        std::fs::write(&plan_path, "views=10,20\nmethods=fbp\nsize=32\n").unwrap();
        let args = BenchArgs {
            plan: Some(plan_path),
            phantom: None,
            size: None,
            views: Some("15".into()),
            methods: None,
            seeds: None,
            iters: None,
            lr: None,
            gaussians: None,
            noise: None,
            out: None,
            parallel: false,
        };
        let plan = bench_plan(&args).unwrap();
        assert_eq!(plan.views, vec![15]);
        assert_eq!(plan.methods, vec![Method::Fbp]);
        assert_eq!(plan.size, 32);
    }
}
