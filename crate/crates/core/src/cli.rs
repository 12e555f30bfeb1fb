//! Command-line front end: `simulate`, `estimate`, `bounds`, `mc` and
//! `replay`.
//!
//! Every command resolves its flags (and an optional JSON config file merged
//! over them) into a settings record, runs, and writes `manifest.json` next
//! to its outputs. The manifest's `config` field can be fed back through
//! `replay` to reproduce the outputs byte for byte.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bounds::{
    compare_on_lattice, estimate_caps, lattice, outer_set, write_lattice_csv, BoundsConfig, BoundsError, BoundsFrontiers,
    OuterSet,
};
use crate::data::{load_csv, save_csv, CsvSchema, DataError, Dataset, LevelRegistry};
use crate::estimator::{
    derived_quantities, fit_curve, naive_curve, DeltaPolicy, EstimatorError, FitConfig, QuantileCurveFit, QuantileGrid,
};
use crate::inference::{bootstrap_band, coverage_study, BootstrapConfig, Contrast, InferenceError};
use crate::simulation::{generate, mc_study, Design, DgpSpec, SimulationError, StudyConfig};
use crate::smoothing::SmootherKind;
use crate::surface::{assemble_surface, BandwidthPolicy};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Estimation(#[from] EstimatorError),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("output check failed: {0}")]
    Validation(String),
}

impl CliError {
    /// 2 for bad invocations or unreadable input, 1 for failures while
    /// computing or writing.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Data(_) => 2,
            CliError::Bounds(BoundsError::BelowFrontier { .. } | BoundsError::InvalidQuantile(_)) => 2,
            CliError::Simulation(
                SimulationError::UnknownDesign(_) | SimulationError::EmptySample | SimulationError::NoReplications,
            ) => 2,
            CliError::Inference(
                InferenceError::TooFewDraws(_)
                | InferenceError::Level(_)
                | InferenceError::Threshold(_)
                | InferenceError::Contrast { .. }
                | InferenceError::NoReplications,
            ) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "ivcr", version, about = "IV quantile estimation for competing-risks durations")]
pub struct Cli {
    /// Worker threads; 0 uses every available core.
    #[arg(long, global = true, env = "IVCR_THREADS")]
    pub threads: Option<usize>,
    /// JSON file whose fields override the resolved settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a dataset from one of the benchmark designs.
    Simulate(SimulateArgs),
    /// Fit the quantile curves on a CSV dataset.
    Estimate(EstimateArgs),
    /// Outer sets for quantiles beyond the estimated frontier.
    Bounds(BoundsArgs),
    /// Monte Carlo replications of a benchmark design.
    Mc(McArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=2))]
    pub design: u32,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV; the level sidecar and manifest are written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SmootherArg {
    LocalLinear,
    Convolution,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Number of grid points `u_m = m / M`.
    #[arg(long, default_value_t = 100)]
    pub grid: usize,
    /// Kernel bandwidth: a positive number or `rot` for the per-cell rule of thumb.
    #[arg(long, default_value = "rot")]
    pub bandwidth: String,
    /// Frontier margin: a positive number or `rot`.
    #[arg(long, default_value = "rot")]
    pub delta: String,
    #[arg(long, value_enum, default_value_t = SmootherArg::LocalLinear)]
    pub smoother: SmootherArg,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Level sidecar JSON; defaults to `<data>.levels.json` when that exists.
    #[arg(long)]
    pub levels: Option<PathBuf>,
    /// Unreachable cell as `treatment:instrument` labels; repeatable.
    #[arg(long = "structural-zero")]
    pub structural_zero: Vec<String>,
}

#[derive(Debug, Args)]
pub struct BootArgs {
    /// Bootstrap draws; 0 disables the bootstrap.
    #[arg(long, default_value_t = 0)]
    pub boot_draws: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    pub boot: BootArgs,
    /// Also write the naive comparator.
    #[arg(long)]
    pub naive: bool,
    /// Also write densities and hazards at the fitted points.
    #[arg(long)]
    pub derived: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Quantile levels; repeatable or comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub u: Vec<f64>,
    /// Points per dimension of a lattice dump; 0 skips it.
    #[arg(long, default_value_t = 0)]
    pub lattice: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct McArgs {
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=2))]
    pub design: u32,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub reps: u64,
    #[command(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    pub boot: BootArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write to this location instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub path: PathBuf,
    pub levels: Option<PathBuf>,
    #[serde(default)]
    pub structural_zeros: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSettings {
    pub design: Design,
    pub n: usize,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSettings {
    pub data: DataSource,
    pub fit: FitConfig,
    pub bootstrap: Option<BootstrapConfig>,
    #[serde(default)]
    pub naive: bool,
    #[serde(default)]
    pub derived: bool,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsSettings {
    pub data: DataSource,
    pub fit: FitConfig,
    pub u: Vec<f64>,
    #[serde(default)]
    pub bounds: BoundsConfig,
    #[serde(default)]
    pub lattice: usize,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSettings {
    pub design: Design,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub study: StudyConfig,
    pub bootstrap: Option<BootstrapConfig>,
    pub out: PathBuf,
}

/// A fully resolved command, as echoed in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Resolved {
    Simulate(SimulateSettings),
    Estimate(EstimateSettings),
    Bounds(BoundsSettings),
    Mc(McSettings),
}

impl Resolved {
    fn name(&self) -> &'static str {
        match self {
            Resolved::Simulate(_) => "simulate",
            Resolved::Estimate(_) => "estimate",
            Resolved::Bounds(_) => "bounds",
            Resolved::Mc(_) => "mc",
        }
    }

    fn seed(&self) -> Option<u64> {
        match self {
            Resolved::Simulate(s) => Some(s.seed),
            Resolved::Mc(s) => Some(s.seed),
            Resolved::Estimate(s) => s.bootstrap.as_ref().map(|b| b.seed),
            Resolved::Bounds(_) => None,
        }
    }

    fn input(&self) -> Option<&Path> {
        match self {
            Resolved::Estimate(s) => Some(&s.data.path),
            Resolved::Bounds(s) => Some(&s.data.path),
            _ => None,
        }
    }

    fn set_out(&mut self, out: PathBuf) {
        match self {
            Resolved::Simulate(s) => s.out = out,
            Resolved::Estimate(s) => s.out = out,
            Resolved::Bounds(s) => s.out = out,
            Resolved::Mc(s) => s.out = out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Resolved,
    pub seed: Option<u64>,
    pub version: String,
    pub input_sha256: Option<String>,
    pub threads: usize,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub outputs: Vec<PathBuf>,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

fn fit_config(args: &FitArgs) -> Result<FitConfig, CliError> {
    let grid = QuantileGrid::uniform(args.grid).map_err(|e| CliError::Usage(e.to_string()))?;
    let positive = |flag: &str, s: &str| -> Result<Option<f64>, CliError> {
        if s == "rot" {
            return Ok(None);
        }
        match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(Some(v)),
            _ => Err(CliError::Usage(format!("--{flag} must be a positive number or `rot`, got `{s}`"))),
        }
    };
    Ok(FitConfig {
        grid,
        bandwidth: positive("bandwidth", &args.bandwidth)?.map_or(BandwidthPolicy::RuleOfThumb, BandwidthPolicy::Fixed),
        delta: positive("delta", &args.delta)?.map_or(DeltaPolicy::RuleOfThumb, DeltaPolicy::Uniform),
        smoother: match args.smoother {
            SmootherArg::LocalLinear => SmootherKind::LocalLinear,
            SmootherArg::Convolution => SmootherKind::Convolution,
        },
        ..FitConfig::default()
    })
}

fn boot_config(args: &BootArgs) -> Option<BootstrapConfig> {
    (args.boot_draws > 0).then(|| BootstrapConfig {
        draws: args.boot_draws,
        seed: args.seed,
        level: args.level,
        ..BootstrapConfig::default()
    })
}

fn data_source(args: &DataArgs) -> Result<DataSource, CliError> {
    let structural_zeros = args
        .structural_zero
        .iter()
        .map(|s| {
            s.split_once(':')
                .map(|(z, w)| (z.to_string(), w.to_string()))
                .ok_or_else(|| CliError::Usage(format!("--structural-zero expects `treatment:instrument`, got `{s}`")))
        })
        .collect::<Result<_, _>>()?;
    Ok(DataSource {
        path: args.data.clone(),
        levels: args.levels.clone(),
        structural_zeros,
    })
}

fn design(d: u32) -> Result<Design, CliError> {
    Design::try_from(d).map_err(CliError::from)
}

fn resolve(command: Command) -> Result<Resolved, CliError> {
    Ok(match command {
        Command::Simulate(a) => Resolved::Simulate(SimulateSettings {
            design: design(a.design)?,
            n: a.n as usize,
            seed: a.seed,
            out: a.out,
        }),
        Command::Estimate(a) => Resolved::Estimate(EstimateSettings {
            data: data_source(&a.data)?,
            fit: fit_config(&a.fit)?,
            bootstrap: boot_config(&a.boot),
            naive: a.naive,
            derived: a.derived,
            out: a.out,
        }),
        Command::Bounds(a) => Resolved::Bounds(BoundsSettings {
            data: data_source(&a.data)?,
            fit: fit_config(&a.fit)?,
            u: a.u,
            bounds: BoundsConfig::default(),
            lattice: a.lattice,
            out: a.out,
        }),
        Command::Mc(a) => Resolved::Mc(McSettings {
            design: design(a.design)?,
            n: a.n as usize,
            reps: a.reps as usize,
            seed: a.boot.seed,
            study: StudyConfig {
                fit: fit_config(&a.fit)?,
                ..StudyConfig::default()
            },
            bootstrap: boot_config(&a.boot),
            out: a.out,
        }),
        Command::Replay(_) => unreachable!("replay is resolved from its manifest"),
    })
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Merges the fields of a JSON config file over the resolved settings.
pub fn apply_config(resolved: Resolved, path: &Path) -> Result<Resolved, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Usage(format!("{}: {source}", path.display())))?;
    let over: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if !over.is_object() {
        return Err(CliError::Usage(format!("{}: expected a JSON object", path.display())));
    }
    let mut base = serde_json::to_value(&resolved).expect("settings serialize");
    merge(&mut base, over);
    if base["command"] != resolved.name() {
        return Err(CliError::Usage("config file may not change the command".into()));
    }
    serde_json::from_value(base).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn validate(resolved: &Resolved) -> Result<(), CliError> {
    let boot = match resolved {
        Resolved::Simulate(s) if s.n == 0 => return Err(SimulationError::EmptySample.into()),
        Resolved::Mc(s) if s.n == 0 => return Err(SimulationError::EmptySample.into()),
        Resolved::Mc(s) if s.reps == 0 => return Err(SimulationError::NoReplications.into()),
        Resolved::Estimate(s) => s.bootstrap.as_ref(),
        Resolved::Mc(s) => s.bootstrap.as_ref(),
        Resolved::Bounds(s) => {
            if let Some(&u) = s.u.iter().find(|&&u| !(u > 0.0 && u <= 1.0)) {
                return Err(BoundsError::InvalidQuantile(u).into());
            }
            None
        }
        _ => None,
    };
    if let Some(b) = boot {
        b.validate()?;
    }
    Ok(())
}

fn load_dataset(src: &DataSource) -> Result<Dataset, CliError> {
    let sidecar = src.levels.clone().or_else(|| {
        let p = sidecar_path(&src.path);
        p.exists().then_some(p)
    });
    let mut schema = CsvSchema::default();
    if let Some(p) = sidecar {
        schema = schema.with_registry(&LevelRegistry::load(p)?);
    }
    schema.structural_zeros.extend(src.structural_zeros.iter().cloned());
    Ok(load_csv(&src.path, &schema)?)
}

/// `dir/name.csv` → `dir/name.levels.json`.
pub fn sidecar_path(data: &Path) -> PathBuf {
    data.with_extension("levels.json")
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(DataError::Io {
        path: path.to_path_buf(),
        source: e,
    }))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

struct Outputs {
    written: Vec<PathBuf>,
}

impl Outputs {
    fn file(&mut self, path: PathBuf, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
        let f = File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(f);
        body(&mut w).and_then(|_| w.flush()).map_err(io_err(&path))?;
        self.written.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, path: PathBuf, value: &T) -> Result<(), CliError> {
        self.file(path, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)
        })
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Serialize)]
struct FitReport<'a> {
    treatment_levels: &'a [String],
    instrument_levels: &'a [String],
    n: usize,
    #[serde(flatten)]
    fit: &'a QuantileCurveFit,
}

fn write_curves(out: &mut Outputs, dir: &Path, data: &Dataset, fit: &QuantileCurveFit) -> Result<(), CliError> {
    let labels = data.treatment_levels();
    out.file(dir.join("curves.csv"), |w| {
        let cols: Vec<String> = labels.iter().map(|l| format!("theta_{l}")).collect();
        writeln!(w, "u,{},reported", cols.join(","))?;
        for (m, &u) in fit.grid.points().iter().enumerate() {
            let vals: Vec<String> = fit.theta[m].iter().map(|t| opt(t.is_finite().then_some(*t))).collect();
            writeln!(w, "{u},{},{}", vals.join(","), u8::from(fit.reported_mask[m]))?;
        }
        Ok(())
    })?;
    out.file(dir.join("qte.csv"), |w| {
        writeln!(w, "u,qte")?;
        for (m, &u) in fit.grid.points().iter().enumerate() {
            if let Some(q) = fit.qte(m) {
                writeln!(w, "{u},{q}")?;
            }
        }
        Ok(())
    })
}

fn run_estimate(s: &EstimateSettings, out: &mut Outputs) -> Result<(), CliError> {
    let data = load_dataset(&s.data)?;
    let fit = fit_curve(&data, &s.fit)?;
    create_dir(&s.out)?;
    out.json(
        s.out.join("fit.json"),
        &FitReport {
            treatment_levels: data.treatment_levels(),
            instrument_levels: data.instrument_levels(),
            n: data.len(),
            fit: &fit,
        },
    )?;
    write_curves(out, &s.out, &data, &fit)?;
    if s.naive {
        let naive = naive_curve(&data, &s.fit.grid);
        out.file(s.out.join("naive.csv"), |w| {
            let cols: Vec<String> = data.treatment_levels().iter().map(|l| format!("theta_{l}")).collect();
            writeln!(w, "u,{},qte", cols.join(","))?;
            for (m, &u) in naive.grid.points().iter().enumerate() {
                let vals: Vec<String> = naive.theta[m].iter().map(|t| opt(t.is_finite().then_some(*t))).collect();
                writeln!(w, "{u},{},{}", vals.join(","), opt(naive.contrast(m, 1, 0)))?;
            }
            Ok(())
        })?;
    }
    if s.derived {
        let swapped = fit_curve(&data.with_swapped_causes(), &s.fit).ok();
        let derived = derived_quantities(&fit, swapped.as_ref());
        out.file(s.out.join("derived.csv"), |w| {
            writeln!(w, "level,u,t,density,subdistribution_hazard,cause_specific_hazard")?;
            for (l, d) in derived.levels.iter().enumerate() {
                let label = &data.treatment_levels()[l];
                for i in 0..d.curve.u.len() {
                    writeln!(
                        w,
                        "{label},{},{},{},{},{}",
                        d.curve.u[i],
                        d.curve.t[i],
                        opt(d.density[i]),
                        opt(d.subdistribution_hazard[i]),
                        opt(d.cause_specific_hazard[i])
                    )?;
                }
            }
            Ok(())
        })?;
    }
    if let Some(boot) = &s.bootstrap {
        let band = bootstrap_band(&data, &s.fit, boot, Contrast::default())?;
        for r in band.rows.iter().filter(|r| r.valid) {
            if r.lower > r.upper {
                return Err(CliError::Validation(format!("band at u = {} has lower > upper", r.u)));
            }
        }
        out.file(s.out.join("band.csv"), |w| band.write_csv(w))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct BoundsReport<'a> {
    treatment_levels: &'a [String],
    frontiers: &'a BoundsFrontiers,
    sets: &'a [OuterSet],
}

fn run_bounds(s: &BoundsSettings, out: &mut Outputs) -> Result<(), CliError> {
    let data = load_dataset(&s.data)?;
    let fit = fit_curve(&data, &s.fit)?;
    let surface = assemble_surface(&data, &s.fit.bandwidth, s.fit.smoother).map_err(EstimatorError::from)?;
    let frontiers = BoundsFrontiers {
        y1: fit.frontiers.y_hat.clone(),
        caps: estimate_caps(&data),
        u_hat: fit.frontiers.u_hat,
    };
    let sets = s
        .u
        .iter()
        .map(|&u| outer_set(u, &surface, &frontiers, &s.bounds))
        .collect::<Result<Vec<_>, _>>()?;
    create_dir(&s.out)?;
    out.json(
        s.out.join("bounds.json"),
        &BoundsReport {
            treatment_levels: data.treatment_levels(),
            frontiers: &frontiers,
            sets: &sets,
        },
    )?;
    if s.lattice >= 2 {
        let upper: Vec<f64> = frontiers.caps.iter().map(|c| 1.25 * c).collect();
        let points = lattice(&upper, s.lattice);
        for (i, set) in sets.iter().enumerate() {
            out.file(s.out.join(format!("lattice_{i}.csv")), |w| {
                write_lattice_csv(w, set, &surface, &frontiers, &points)
            })?;
            let tol: Vec<f64> = frontiers.y1.iter().map(|y| s.bounds.rel_tol * y).collect();
            let cmp = compare_on_lattice(set, &surface, &frontiers, &points, &tol);
            if cmp.false_exclusions > 0 {
                return Err(CliError::Validation(format!(
                    "outer set at u = {} misses {} feasible lattice points",
                    set.u, cmp.false_exclusions
                )));
            }
        }
    }
    Ok(())
}

fn run_simulate(s: &SimulateSettings, out: &mut Outputs) -> Result<(), CliError> {
    let sample = generate(&DgpSpec {
        design: s.design,
        n: s.n,
        seed: s.seed,
    })?;
    let data = sample.to_dataset()?;
    if let Some(dir) = s.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_csv(&data, &s.out)?;
    out.written.push(s.out.clone());
    out.file(sidecar_path(&s.out), |w| writeln!(w, "{}", data.registry().to_json()))
}

fn run_mc(s: &McSettings, out: &mut Outputs) -> Result<(), CliError> {
    let spec = DgpSpec {
        design: s.design,
        n: s.n,
        seed: s.seed,
    };
    let summary = mc_study(&spec, s.reps, &s.study)?;
    create_dir(&s.out)?;
    out.file(s.out.join("curve.csv"), |w| summary.write_curve_csv(w))?;
    out.file(s.out.join("u_hat_histogram.csv"), |w| summary.write_histogram_csv(w))?;
    out.file(s.out.join("replications.csv"), |w| summary.write_replications_csv(w))?;
    out.file(s.out.join("frontier.csv"), |w| {
        writeln!(w, "mean_u_hat,frontier_conservative_share,u_before_conservative_share,failed")?;
        writeln!(
            w,
            "{},{},{},{}",
            summary.mean_u_hat, summary.frontier_conservative_share, summary.u_before_conservative_share, summary.failed
        )
    })?;
    if let Some(boot) = &s.bootstrap {
        let table = coverage_study(&spec, s.reps, &s.study.fit, boot)?;
        out.file(s.out.join("coverage.csv"), |w| table.write_csv(w))?;
    }
    Ok(())
}

fn check_outputs(paths: &[PathBuf]) -> Result<(), CliError> {
    for p in paths {
        let bytes = fs::read(p).map_err(io_err(p))?;
        if bytes.is_empty() {
            return Err(CliError::Validation(format!("{} is empty", p.display())));
        }
        if p.extension().is_some_and(|e| e == "json") {
            serde_json::from_slice::<Value>(&bytes)
                .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
        }
    }
    Ok(())
}

fn manifest_path(resolved: &Resolved) -> PathBuf {
    match resolved {
        Resolved::Simulate(s) => s.out.with_extension("manifest.json"),
        Resolved::Estimate(s) => s.out.join("manifest.json"),
        Resolved::Bounds(s) => s.out.join("manifest.json"),
        Resolved::Mc(s) => s.out.join("manifest.json"),
    }
}

/// Runs a resolved command and writes its manifest; returns the manifest.
pub fn execute(resolved: &Resolved, threads: usize) -> Result<RunManifest, CliError> {
    validate(resolved)?;
    let input_sha256 = resolved.input().map(sha256_file).transpose()?;
    let started = now_ms();
    let mut out = Outputs { written: Vec::new() };
    match resolved {
        Resolved::Simulate(s) => run_simulate(s, &mut out)?,
        Resolved::Estimate(s) => run_estimate(s, &mut out)?,
        Resolved::Bounds(s) => run_bounds(s, &mut out)?,
        Resolved::Mc(s) => run_mc(s, &mut out)?,
    }
    check_outputs(&out.written)?;
    let manifest = RunManifest {
        command: resolved.name().into(),
        config: resolved.clone(),
        seed: resolved.seed(),
        version: env!("CARGO_PKG_VERSION").into(),
        input_sha256,
        threads,
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        outputs: out.written,
    };
    let mut m = Outputs { written: Vec::new() };
    m.json(manifest_path(resolved), &manifest)?;
    check_outputs(&m.written)?;
    Ok(manifest)
}

fn setup_threads(threads: Option<usize>) -> usize {
    let n = threads.unwrap_or(0);
    // A second initialization in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    rayon::current_num_threads()
}

pub fn run(cli: Cli) -> Result<RunManifest, CliError> {
    let resolved = match cli.command {
        Command::Replay(a) => {
            let text = fs::read_to_string(&a.manifest)
                .map_err(|e| CliError::Usage(format!("{}: {e}", a.manifest.display())))?;
            let manifest: RunManifest =
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", a.manifest.display())))?;
            let mut r = manifest.config;
            if let Some(out) = a.out {
                r.set_out(out);
            }
            r
        }
        other => resolve(other)?,
    };
    let resolved = match &cli.config {
        Some(p) => apply_config(resolved, p)?,
        None => resolved,
    };
    let threads = setup_threads(cli.threads);
    execute(&resolved, threads)
}

/// Parses `args`, runs, reports errors on stderr and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Bounds(BoundsError::BelowFrontier { .. }) = e {
                eprintln!("hint: quantiles below the frontier are point identified; use `ivcr estimate`");
            }
            e.exit_code()
        }
    }
}
