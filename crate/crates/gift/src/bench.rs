//! Sweeps reconstruction methods over view counts and seeds.

use std::fmt;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use gift_core::grid::make_geometry;
use gift_core::objective::{psnr, ssim_volume, SsimConfig};
use gift_core::optimizer::{reconstruct, ReconConfig, ReconError};
use gift_core::projector::{fbp, radon_forward};
use gift_core::VolumeGrid;
use rayon::prelude::*;
use thiserror::Error;

use crate::formats::{append_metrics_csv, write_pgm, FormatError, MetricsRow, Window};
use crate::noise::{add_noise, NoiseModel};
use crate::phantom::{lesion_phantom, shepp_logan};

pub const DEFAULT_VIEWS: [usize; 4] = [60, 90, 120, 180];
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhantomKind {
    SheppLogan,
    Lesion,
}

impl PhantomKind {
    pub fn generate(self, size: usize, seed: u64) -> Result<VolumeGrid, gift_core::CoreError> {
        match self {
            PhantomKind::SheppLogan => shepp_logan(size),
            PhantomKind::Lesion => lesion_phantom(size, seed),
        }
    }
}

impl FromStr for PhantomKind {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "shepp-logan" => Ok(PhantomKind::SheppLogan),
            "lesion" => Ok(PhantomKind::Lesion),
            other => Err(PlanError::Value { key: "phantom", value: other.into() }),
        }
    }
}

impl fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhantomKind::SheppLogan => "shepp-logan",
            PhantomKind::Lesion => "lesion",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Fbp,
    Gift,
}

impl FromStr for Method {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "fbp" => Ok(Method::Fbp),
            "gift" => Ok(Method::Gift),
            other => Err(PlanError::Value { key: "methods", value: other.into() }),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Fbp => "fbp",
            Method::Gift => "gift",
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("unknown plan key `{0}`")]
    UnknownKey(String),
    #[error("bad value for {key}: `{value}`")]
    Value { key: &'static str, value: String },
    #[error("{0} must not be empty")]
    Empty(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchPlan {
    pub phantom: PhantomKind,
    pub size: usize,
    pub views: Vec<usize>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub recon: ReconConfig,
    pub noise: NoiseModel,
    pub parallel: bool,
}

impl Default for BenchPlan {
    fn default() -> Self {
        Self {
            phantom: PhantomKind::SheppLogan,
            size: 128,
            views: DEFAULT_VIEWS.to_vec(),
            methods: vec![Method::Fbp, Method::Gift],
            seeds: vec![0],
            out_dir: PathBuf::from("bench-out"),
            recon: ReconConfig::default(),
            noise: NoiseModel::None,
            parallel: false,
        }
    }
}

pub fn parse_list<T: FromStr>(key: &'static str, value: &str) -> Result<Vec<T>, PlanError> {
    let items = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| PlanError::Value { key, value: s.into() }))
        .collect::<Result<Vec<T>, _>>()?;
    if items.is_empty() {
        return Err(PlanError::Empty(key));
    }
    Ok(items)
}

fn parse_one<T: FromStr>(key: &'static str, value: &str) -> Result<T, PlanError> {
    value.trim().parse().map_err(|_| PlanError::Value { key, value: value.into() })
}

impl BenchPlan {
    /// Reads `key = value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self, PlanError> {
        let mut plan = BenchPlan::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(PlanError::Syntax { line: i + 1 })?;
            plan.set(key.trim(), value.trim())?;
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PlanError> {
        match key {
            "phantom" => self.phantom = value.parse()?,
            "size" => self.size = parse_one("size", value)?,
            "views" => self.views = parse_list("views", value)?,
            "methods" => self.methods = parse_list("methods", value)?,
            "seeds" => self.seeds = parse_list("seeds", value)?,
            "out" => self.out_dir = PathBuf::from(value),
            "iters" => self.recon.max_iters = parse_one("iters", value)?,
            "lr" => self.recon.lr = parse_one("lr", value)?,
            "gaussians" => self.recon.gaussian_count = Some(parse_one("gaussians", value)?),
            "noise" => {
                self.noise = value.parse().map_err(|_| PlanError::Value { key: "noise", value: value.into() })?
            }
            "parallel" => self.parallel = parse_one("parallel", value)?,
            other => return Err(PlanError::UnknownKey(other.into())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.views.is_empty() {
            return Err(PlanError::Empty("views"));
        }
        if self.methods.is_empty() {
            return Err(PlanError::Empty("methods"));
        }
        if self.seeds.is_empty() {
            return Err(PlanError::Empty("seeds"));
        }
        if let Some(&v) = self.views.iter().find(|&&v| v == 0) {
            return Err(PlanError::Value { key: "views", value: v.to_string() });
        }
        Ok(())
    }

    /// Cross product in (seed, views, method) order.
    pub fn entries(&self) -> Vec<BenchEntry> {
        let mut out = Vec::new();
        for &seed in &self.seeds {
            for &views in &self.views {
                for &method in &self.methods {
                    out.push(BenchEntry { method, views, seed });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchEntry {
    pub method: Method,
    pub views: usize,
    pub seed: u64,
}

impl BenchEntry {
    pub fn image_name(&self) -> String {
        format!("{}_{}v_s{}.pgm", self.method, self.views, self.seed)
    }
}

#[derive(Debug, Error)]
pub enum EntryError {
    #[error(transparent)]
    Core(#[from] gift_core::CoreError),
    #[error(transparent)]
    Recon(#[from] ReconError),
    #[error(transparent)]
    Noise(#[from] crate::noise::NoiseError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug)]
pub struct BenchOutcome {
    pub entry: BenchEntry,
    pub result: Result<MetricsRow, EntryError>,
}

/// PSNR and SSIM of `recon` against `reference`, using the reference range.
pub fn score(recon: &VolumeGrid, reference: &VolumeGrid) -> Result<(f64, f64), gift_core::CoreError> {
    let (lo, hi) = reference.min_max();
    let range = if hi > lo { hi - lo } else { 1.0 };
    let p = psnr(recon.data(), reference.data(), range)?;
    let s = ssim_volume(recon, reference, &SsimConfig::new(range))?;
    Ok((p, s))
}

pub fn run_entry(plan: &BenchPlan, entry: BenchEntry) -> Result<MetricsRow, EntryError> {
    let reference = plan.phantom.generate(plan.size, entry.seed)?;
    let geom = make_geometry(entry.views, [plan.size, plan.size])?;
    let clean = radon_forward(&reference, &geom)?;
    let measured = add_noise(&clean, plan.noise, entry.seed)?;

    let start = Instant::now();
    let (volume, iters) = match entry.method {
        Method::Fbp => (fbp(&measured, &geom)?, 0),
        Method::Gift => {
            let cfg = ReconConfig { seed: entry.seed, ..plan.recon.clone() };
            let out = reconstruct(&measured, &geom, &cfg, &mut |_| ControlFlow::Continue(()))?;
            (out.volume, out.trace.len())
        }
    };
    let wall_seconds = start.elapsed().as_secs_f64();

    let (psnr_db, ssim) = score(&volume, &reference)?;
    write_pgm(plan.out_dir.join(entry.image_name()), &volume, Window::MinMax)?;
    Ok(MetricsRow {
        method: entry.method.to_string(),
        phantom: plan.phantom.to_string(),
        views: entry.views,
        psnr_db,
        ssim,
        iters,
        wall_seconds,
        seed: entry.seed,
    })
}

/// Runs every entry, writes `metrics.csv` and the PGM gallery into the
/// plan's output directory, and returns outcomes in plan order. Failed
/// entries appear in the CSV with NaN metrics.
pub fn run_bench(plan: &BenchPlan, mut on_done: impl FnMut(&BenchOutcome) + Send) -> Result<Vec<BenchOutcome>, FormatError> {
    std::fs::create_dir_all(&plan.out_dir).map_err(|e| FormatError::Io { path: plan.out_dir.clone(), source: e })?;
    let entries = plan.entries();
    let outcomes: Vec<BenchOutcome> = if plan.parallel {
        let done = std::sync::Mutex::new(&mut on_done);
        entries
            .par_iter()
            .map(|&entry| {
                let o = BenchOutcome { entry, result: run_entry(plan, entry) };
                (done.lock().unwrap())(&o);
                o
            })
            .collect()
    } else {
        entries
            .iter()
            .map(|&entry| {
                let o = BenchOutcome { entry, result: run_entry(plan, entry) };
                on_done(&o);
                o
            })
            .collect()
    };

    let rows: Vec<MetricsRow> = outcomes
        .iter()
        .map(|o| match &o.result {
            Ok(row) => row.clone(),
            Err(_) => MetricsRow {
                method: o.entry.method.to_string(),
                phantom: plan.phantom.to_string(),
                views: o.entry.views,
                psnr_db: f64::NAN,
                ssim: f64::NAN,
                iters: 0,
                wall_seconds: 0.0,
                seed: o.entry.seed,
            },
        })
        .collect();
    let csv = metrics_path(&plan.out_dir);
    if csv.exists() {
        std::fs::remove_file(&csv).map_err(|e| FormatError::Io { path: csv.clone(), source: e })?;
    }
    append_metrics_csv(&csv, &rows)?;
    Ok(outcomes)
}

pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join(METRICS_FILE)
}

/// Mean PSNR per (method, views), averaged over successful seeds.
pub fn summarize(outcomes: &[BenchOutcome]) -> Vec<(Method, usize, Option<f64>)> {
    let mut keys: Vec<(Method, usize)> = outcomes.iter().map(|o| (o.entry.method, o.entry.views)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(m, v)| {
            let vals: Vec<f64> = outcomes
                .iter()
                .filter(|o| o.entry.method == m && o.entry.views == v)
                .filter_map(|o| o.result.as_ref().ok().map(|r| r.psnr_db))
                .collect();
            let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
            (m, v, mean)
        })
        .collect()
}

pub fn format_summary(summary: &[(Method, usize, Option<f64>)]) -> String {
    let mut s = String::from("method  views  psnr_db\n");
    for (m, v, p) in summary {
        match p {
            Some(p) => s.push_str(&format!("{m:<6}  {v:>5}  {p:>7.2}\n")),
            None => s.push_str(&format!("{m:<6}  {v:>5}   FAILED\n")),
        }
    }
    s
}
