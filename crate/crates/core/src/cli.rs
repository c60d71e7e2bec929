//! Experiment configuration and the subcommands behind the `crowdroad`
//! binary.
//!
//! Exit codes: 0 success, 1 output failure or an MMSE ordering violation,
//! 2 configuration or usage error, 3 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::cloud::CloudState;
use crate::evaluation::oracle::{compare_sensor_sets, random_selector_system};
use crate::evaluation::{run_baselines, write_metrics_csv, RunMetrics, Scheme};
use crate::gp::{fit, FitOptions, GpHyperParams, RegressionMode, TrainingData};
use crate::io::{write_csv_rows, Cell};
use crate::road::SensingConfig;
use crate::simulation::{resume_procedure, simulate_fleet, Scenario, SeedBundle};
use crate::vehicle::{DiscretizationOptions, QuarterCarParams, RoadModelParams, RoadSpectrum};
use crate::{rng, Error, VERSION};

/// The bundled reference experiment.
pub const TABLE1_CONFIG: &str = include_str!("../../../configs/table1.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleConfig {
    pub sprung_mass_kg: f64,
    pub unsprung_mass_kg: f64,
    pub spring_stiffness_kn_m: f64,
    pub tire_stiffness_kn_m: f64,
    pub suspension_damping_ns_m: f64,
    #[serde(default)]
    pub tire_damping_ns_m: f64,
    /// Overrides the fleet-wide speed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed_m_s: Option<f64>,
}

/// Either `pole` and `gain` directly or a roughness `spectrum`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pole: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<RoadSpectrum>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmitFlags {
    pub traces: bool,
    pub gp_snapshots: bool,
    pub metrics: bool,
}

impl Default for EmitFlags {
    fn default() -> Self {
        Self {
            traces: true,
            gp_snapshots: true,
            metrics: true,
        }
    }
}

/// One JSON document describing a batch of runs. Stiffnesses are given in
/// kN/m and converted to N/m when the scenario is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub fleet: Vec<VehicleConfig>,
    pub speed_m_s: f64,
    /// Speed the cloud regression is normalized to; defaults to `speed_m_s`.
    pub nominal_speed_m_s: Option<f64>,
    pub sample_time_s: f64,
    pub n_steps: usize,
    pub road: RoadConfig,
    pub sensing: SensingConfig,
    /// Fixed-lag window; `null` smooths over the whole pass.
    pub lag: Option<usize>,
    pub mode: RegressionMode,
    pub discretization: DiscretizationOptions,
    pub fit: FitOptions,
    pub refit_restarts: usize,
    pub heteroscedastic: bool,
    pub noise_miscalibration: f64,
    pub shared_road: bool,
    pub initial_input_noise_std: f64,
    pub schemes: Vec<Scheme>,
    pub seeds: usize,
    pub seed_offset: u64,
    pub workers: Option<usize>,
    pub output_dir: PathBuf,
    pub emit: EmitFlags,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            fleet: Vec::new(),
            speed_m_s: 40.0 / 1.5,
            nominal_speed_m_s: None,
            sample_time_s: 0.01,
            n_steps: 151,
            road: RoadConfig::default(),
            sensing: SensingConfig::default(),
            lag: Some(25),
            mode: RegressionMode::NoisyInput,
            discretization: DiscretizationOptions::default(),
            fit: FitOptions::default(),
            refit_restarts: 1,
            heteroscedastic: false,
            noise_miscalibration: 1.0,
            shared_road: true,
            initial_input_noise_std: 0.1,
            schemes: Scheme::ALL.to_vec(),
            seeds: 20,
            seed_offset: 0,
            workers: None,
            output_dir: PathBuf::from("out"),
            emit: EmitFlags::default(),
        }
    }
}

/// A validation failure at a JSON path such as `fleet[2].sprung_mass_kg`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    pub path: String,
    pub reason: String,
}

fn issue(path: impl Into<String>, reason: impl Into<String>) -> ConfigIssue {
    ConfigIssue {
        path: path.into(),
        reason: reason.into(),
    }
}

fn positive(path: impl Into<String>, v: f64) -> Result<(), ConfigIssue> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(issue(path, format!("must be positive, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate().map_err(|i| CliError::Config(describe(text, &i)))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigIssue> {
        if self.fleet.is_empty() {
            return Err(issue("fleet", "need at least one vehicle"));
        }
        for (i, v) in self.fleet.iter().enumerate() {
            let p = |k: &str| format!("fleet[{i}].{k}");
            positive(p("sprung_mass_kg"), v.sprung_mass_kg)?;
            positive(p("unsprung_mass_kg"), v.unsprung_mass_kg)?;
            positive(p("spring_stiffness_kn_m"), v.spring_stiffness_kn_m)?;
            positive(p("tire_stiffness_kn_m"), v.tire_stiffness_kn_m)?;
            positive(p("suspension_damping_ns_m"), v.suspension_damping_ns_m)?;
            if !(v.tire_damping_ns_m.is_finite() && v.tire_damping_ns_m >= 0.0) {
                return Err(issue(p("tire_damping_ns_m"), "must be non-negative"));
            }
            if let Some(s) = v.speed_m_s {
                positive(p("speed_m_s"), s)?;
            }
        }
        positive("speed_m_s", self.speed_m_s)?;
        if let Some(v) = self.nominal_speed_m_s {
            positive("nominal_speed_m_s", v)?;
        }
        positive("sample_time_s", self.sample_time_s)?;
        if self.n_steps < 2 {
            return Err(issue("n_steps", "must be at least 2"));
        }
        if self.lag.is_some_and(|l| l > self.n_steps) {
            return Err(issue("lag", "must not exceed n_steps"));
        }
        self.road_params().map_err(|e| issue("road", e.to_string()))?;
        self.sensing.validate().map_err(|e| issue("sensing", e.to_string()))?;
        self.discretization_check()?;
        if self.fit.restarts == 0 {
            return Err(issue("fit.restarts", "must be at least 1"));
        }
        if self.fit.max_iterations == 0 {
            return Err(issue("fit.max_iterations", "must be at least 1"));
        }
        if !(self.fit.gradient_tolerance.is_finite() && self.fit.gradient_tolerance > 0.0) {
            return Err(issue("fit.gradient_tolerance", "must be positive"));
        }
        if self.refit_restarts == 0 {
            return Err(issue("refit_restarts", "must be at least 1"));
        }
        positive("noise_miscalibration", self.noise_miscalibration)?;
        positive("initial_input_noise_std", self.initial_input_noise_std)?;
        if self.schemes.is_empty() {
            return Err(issue("schemes", "need at least one scheme"));
        }
        if self.seeds == 0 {
            return Err(issue("seeds", "must be at least 1"));
        }
        if self.workers == Some(0) {
            return Err(issue("workers", "must be at least 1"));
        }
        Ok(())
    }

    fn discretization_check(&self) -> Result<(), ConfigIssue> {
        let q = self.discretization.physical_process_noise;
        if !(q.is_finite() && q >= 0.0) {
            return Err(issue("discretization.physical_process_noise", "must be non-negative"));
        }
        Ok(())
    }

    fn road_params(&self) -> crate::Result<RoadModelParams> {
        match (&self.road.spectrum, self.road.pole, self.road.gain) {
            (Some(s), None, None) => RoadModelParams::from_spectrum(*s),
            (None, Some(pole), Some(gain)) => RoadModelParams::new(pole, gain),
            _ => Err(Error::Config("give either `pole` and `gain` or `spectrum`".into())),
        }
    }

    /// Scenario for master seed `seed`, in SI units.
    pub fn scenario(&self, seed: u64) -> crate::Result<Scenario> {
        let fleet = self
            .fleet
            .iter()
            .map(|v| {
                QuarterCarParams::new(
                    v.sprung_mass_kg,
                    v.unsprung_mass_kg,
                    v.spring_stiffness_kn_m * 1e3,
                    v.tire_stiffness_kn_m * 1e3,
                    v.suspension_damping_ns_m,
                )?
                .with_tire_damping(v.tire_damping_ns_m)
            })
            .collect::<crate::Result<Vec<_>>>()?;
        let scenario = Scenario {
            speeds: self.fleet.iter().map(|v| v.speed_m_s.unwrap_or(self.speed_m_s)).collect(),
            fleet,
            road: self.road_params()?,
            nominal_speed: self.nominal_speed_m_s.unwrap_or(self.speed_m_s),
            sample_time: self.sample_time_s,
            n_steps: self.n_steps,
            sensing: self.sensing,
            lag: self.lag,
            mode: self.mode,
            seeds: SeedBundle::from_master(seed),
            discretization: self.discretization,
            fit: self.fit,
            refit_restarts: self.refit_restarts,
            heteroscedastic: self.heteroscedastic,
            noise_miscalibration: self.noise_miscalibration,
            shared_road: self.shared_road,
            initial_input_noise_std: self.initial_input_noise_std,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn master_seeds(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed_offset + i).collect()
    }
}

/// `path: reason`, prefixed with the line of the offending key when it can
/// be found in `text`.
fn describe(text: &str, issue: &ConfigIssue) -> String {
    match locate(text, &issue.path) {
        Some(line) => format!("line {line}: `{}` {}", issue.path, issue.reason),
        None => format!("`{}` {}", issue.path, issue.reason),
    }
}

/// 1-based line of the key named by the last segment of `path`. For
/// `fleet[i].key` this is the `i`-th occurrence of the key.
fn locate(text: &str, path: &str) -> Option<usize> {
    let last = path.rsplit('.').next()?;
    let key = last.split('[').next()?;
    let occurrence = path
        .split_once('[')
        .and_then(|(_, rest)| rest.split(']').next())
        .and_then(|n| n.parse::<usize>().ok())
        .filter(|_| path.contains("]."))
        .unwrap_or(0);
    let needle = format!("\"{key}\"");
    let offset = text.match_indices(&needle).nth(occurrence)?.0;
    Some(text[..offset].matches('\n').count() + 1)
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Numerical(String),
    Output(String),
    Violation(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Output(_) | CliError::Violation(_) => 1,
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn context(self, what: &str) -> Self {
        match self {
            CliError::Usage(m) => CliError::Usage(format!("{what}: {m}")),
            CliError::Config(m) => CliError::Config(format!("{what}: {m}")),
            CliError::Numerical(m) => CliError::Numerical(format!("{what}: {m}")),
            CliError::Output(m) => CliError::Output(format!("{what}: {m}")),
            CliError::Violation(m) => CliError::Violation(format!("{what}: {m}")),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical error: {m}"),
            CliError::Output(m) => write!(f, "output error: {m}"),
            CliError::Violation(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) => CliError::Output(e.to_string()),
            _ if e.is_input_error() => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "crowdroad", version, about = "Collaborative road profile estimation simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every scheme over every seed of an experiment.
    Simulate(SimulateArgs),
    /// Check the pseudo-measurement MMSE ordering on random systems.
    Prop1(Prop1Args),
    /// Fit a GP to a CSV of positions and elevations.
    Gpfit(GpfitArgs),
    /// Continue a crowdsourcing run from a saved cloud state.
    Resume(ResumeArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Experiment config; the bundled reference experiment when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of seeds.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Comma-separated scheme names.
    #[arg(long, value_delimiter = ',')]
    pub schemes: Option<Vec<Scheme>>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed_offset: Option<u64>,
}

#[derive(Debug, Args)]
pub struct Prop1Args {
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub systems: u64,
    #[arg(long, default_value_t = 10)]
    pub horizon: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GpfitArgs {
    /// CSV with `s_m,w_m` columns, or a vehicle trace CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// `gp` or `nigp`.
    #[arg(long, default_value = "nigp", value_parser = parse_mode)]
    pub mode: RegressionMode,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub restarts: Option<usize>,
}

fn parse_mode(s: &str) -> Result<RegressionMode, String> {
    RegressionMode::parse(s).ok_or_else(|| format!("unknown mode `{s}`, expected gp or nigp"))
}

#[derive(Debug, Args)]
pub struct ResumeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// A saved `cloudstate.json`.
    #[arg(long)]
    pub state: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Master seed of the run being continued.
    #[arg(long)]
    pub seed_offset: Option<u64>,
}

/// Parse `args` (including the program name) and run the command.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("crowdroad: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate(a) => cmd_simulate(&a).map(|summary| {
            println!("wrote {} runs to {}", summary.seeds.len(), summary.out.display());
        }),
        Command::Prop1(a) => cmd_prop1(&a),
        Command::Gpfit(a) => cmd_gpfit(&a),
        Command::Resume(a) => cmd_resume(&a),
    }
}

fn load_or_default(path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => ExperimentConfig::parse(TABLE1_CONFIG),
    }
}

#[derive(Debug, Clone)]
pub struct SimulateSummary {
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    /// Per seed, one entry per scheme.
    pub runs: Vec<Vec<RunMetrics>>,
}

/// Overrides the config's `output_dir` when `--out` is absent.
pub const OUT_DIR_ENV: &str = "CROWDROAD_OUT_DIR";

pub fn cmd_simulate(args: &SimulateArgs) -> Result<SimulateSummary, CliError> {
    let mut cfg = load_or_default(args.config.as_deref())?;
    if let Some(n) = args.seeds {
        cfg.seeds = n;
    }
    if let Some(s) = &args.schemes {
        cfg.schemes = s.clone();
    }
    if let Some(w) = args.workers {
        cfg.workers = Some(w);
    }
    if let Some(o) = args.seed_offset {
        cfg.seed_offset = o;
    }
    if let Some(o) = args.out.clone().or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from)) {
        cfg.output_dir = o;
    }
    cfg.validate().map_err(|i| CliError::Usage(format!("`{}` {}", i.path, i.reason)))?;
    simulate(&cfg)
}

/// Run the experiment and write `metrics.csv`, `summary.json` and one
/// directory per seed under `runs/`.
pub fn simulate(cfg: &ExperimentConfig) -> Result<SimulateSummary, CliError> {
    let out = cfg.output_dir.clone();
    fs::create_dir_all(out.join("runs"))?;
    let hash = cfg.hash();
    let seeds = cfg.master_seeds();
    let workers = cfg
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Output(e.to_string()))?;
    let started = Instant::now();
    let runs = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| run_seed(cfg, &hash, seed, &out).map_err(|e| e.context(&format!("seed {seed}"))))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let elapsed = started.elapsed().as_secs_f64();

    let rows = seeds.iter().zip(&runs).flat_map(|(seed, metrics)| {
        metrics.iter().flat_map(move |m| {
            m.vehicles.iter().map(move |v| {
                vec![
                    Cell::Int(*seed as i64),
                    m.scheme.as_str().into(),
                    v.vehicle_index.into(),
                    v.rmse_filtered.into(),
                    v.rmse_smoothed.into(),
                    v.cloud_rmse.into(),
                    v.mean_posterior_std.into(),
                ]
            })
        })
    });
    write_csv_rows(
        fs::File::create(out.join("metrics.csv"))?,
        &[
            "seed",
            "scheme",
            "vehicle_index",
            "rmse_filtered_m",
            "rmse_smoothed_m",
            "cloud_rmse_m",
            "mean_posterior_std_m",
        ],
        rows,
    )?;

    let summary = json!({
        "version": VERSION,
        "config_hash": hash,
        "seeds": seeds,
        "workers": workers,
        "elapsed_s": elapsed,
        "schemes": cfg.schemes.iter().map(|s| scheme_summary(*s, &runs)).collect::<Vec<_>>(),
    });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(SimulateSummary { out, seeds, runs })
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.collect::<Option<Vec<_>>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-vehicle means over seeds.
fn scheme_summary(scheme: Scheme, runs: &[Vec<RunMetrics>]) -> serde_json::Value {
    let of_scheme: Vec<&RunMetrics> = runs
        .iter()
        .filter_map(|r| r.iter().find(|m| m.scheme == scheme))
        .collect();
    let n_vehicles = of_scheme.first().map_or(0, |m| m.vehicles.len());
    let vehicles: Vec<_> = (0..n_vehicles)
        .map(|i| {
            let col = |f: &dyn Fn(&crate::evaluation::VehicleMetrics) -> Option<f64>| {
                mean_of(of_scheme.iter().map(|m| f(&m.vehicles[i])))
            };
            json!({
                "vehicle_index": i + 1,
                "rmse_filtered_m": col(&|v| Some(v.rmse_filtered)),
                "rmse_smoothed_m": col(&|v| Some(v.rmse_smoothed)),
                "cloud_rmse_m": col(&|v| v.cloud_rmse),
                "mean_posterior_std_m": col(&|v| v.mean_posterior_std),
            })
        })
        .collect();
    json!({
        "scheme": scheme,
        "vehicles": vehicles,
        "input_noise_std": mean_of(of_scheme.iter().map(|m| m.input_noise_std)),
    })
}

fn manifest(cfg: &ExperimentConfig, hash: &str, seed: u64, scenario: &Scenario) -> serde_json::Value {
    json!({
        "version": VERSION,
        "config_hash": hash,
        "master_seed": seed,
        "seeds": scenario.seeds,
        "config": cfg,
    })
}

fn run_seed(cfg: &ExperimentConfig, hash: &str, seed: u64, out: &Path) -> Result<Vec<RunMetrics>, CliError> {
    let scenario = cfg.scenario(seed)?;
    let outcome = run_baselines(&scenario, &cfg.schemes)?;
    let dir = out.join("runs").join(format!("seed_{seed:04}"));
    fs::create_dir_all(&dir)?;
    outcome
        .truth
        .write_csv(fs::File::create(dir.join("ground_truth.csv"))?)?;
    let metrics = outcome.metrics();
    if cfg.emit.metrics {
        write_metrics_csv(fs::File::create(dir.join("metrics.csv"))?, &metrics)?;
    }
    for s in &outcome.schemes {
        let sub = dir.join(s.metrics.scheme.as_str());
        let traces = cfg.emit.traces && !s.traces.is_empty();
        let snapshots = cfg.emit.gp_snapshots && !s.snapshots.is_empty();
        if !(traces || snapshots) {
            continue;
        }
        fs::create_dir_all(&sub)?;
        if traces {
            for (trace, m) in s.traces.iter().zip(&s.metrics.vehicles) {
                let path = sub.join(format!("vehicle_{}_trace.csv", m.vehicle_index));
                trace.write_csv(fs::File::create(path)?)?;
            }
        }
        if snapshots {
            for (model, m) in s.snapshots.iter().zip(&s.metrics.vehicles) {
                fs::write(sub.join(format!("gp_after_{}.json", m.vehicle_index)), model.to_json()?)?;
            }
            if let Some(cloud) = &s.cloud {
                fs::write(sub.join("cloudstate.json"), cloud.to_json()?)?;
            }
        }
    }
    let m = manifest(cfg, hash, seed, &scenario);
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
    Ok(metrics)
}

/// One `k'` of one system in the sensor-set report.
#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Row {
    pub system: usize,
    pub states: usize,
    pub sensors: usize,
    pub step: usize,
    pub mmse_without: f64,
    pub mmse_with: f64,
    pub relative_margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Report {
    pub rows: Vec<Prop1Row>,
    pub skipped: usize,
    pub violations: usize,
}

/// Smallest relative MMSE gap that counts as a strict improvement.
pub const PROP1_MARGIN: f64 = 1e-12;

/// Compare MMSE with and without the road selector on `n_systems` random
/// systems of up to five states.
pub fn prop1_report(n_systems: usize, horizon: usize, seed: u64) -> Prop1Report {
    let mut rows = Vec::new();
    let (mut skipped, mut violations) = (0, 0);
    for i in 0..n_systems {
        let mut g = rng::stream(seed, i as u64);
        let n = g.random_range(2..=5);
        let r = g.random_range(1..n);
        let (a, c) = random_selector_system(&mut g, n, r);
        let process_std = g.random_range(0.1..2.0);
        let measurement_std = g.random_range(0.1..2.0);
        let Ok(rep) = compare_sensor_sets(&a, &c, horizon, process_std, measurement_std) else {
            skipped += 1;
            continue;
        };
        if !rep.holds(PROP1_MARGIN) {
            violations += 1;
        }
        for (k, (w, wo)) in rep.mmse_with.iter().zip(&rep.mmse_without).enumerate() {
            rows.push(Prop1Row {
                system: i,
                states: n,
                sensors: r,
                step: k,
                mmse_without: *wo,
                mmse_with: *w,
                relative_margin: (wo - w) / wo,
            });
        }
    }
    Prop1Report {
        rows,
        skipped,
        violations,
    }
}

impl Prop1Report {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> crate::Result<()> {
        let rows = self.rows.iter().map(|r| {
            vec![
                r.system.into(),
                r.states.into(),
                r.sensors.into(),
                r.step.into(),
                r.mmse_without.into(),
                r.mmse_with.into(),
                r.relative_margin.into(),
            ]
        });
        write_csv_rows(
            out,
            &["system", "n", "r", "k", "mmse_r", "mmse_r1", "relative_margin"],
            rows,
        )
    }
}

fn cmd_prop1(args: &Prop1Args) -> Result<(), CliError> {
    let report = prop1_report(args.systems as usize, args.horizon, args.seed);
    match &args.out {
        Some(p) => report.write_csv(fs::File::create(p)?)?,
        None => report.write_csv(std::io::stdout().lock())?,
    }
    let min = report
        .rows
        .iter()
        .map(|r| r.relative_margin)
        .fold(f64::INFINITY, f64::min);
    eprintln!(
        "systems {}, skipped {} (ill-conditioned), violations {}, min relative margin {min:e}",
        args.systems, report.skipped, report.violations
    );
    if report.violations > 0 {
        return Err(CliError::Violation(format!("{} systems violate the ordering", report.violations)));
    }
    Ok(())
}

/// Positions and elevations from a CSV with `s_m,w_m` columns or a
/// vehicle trace (`s_hat_m,w_smooth_m`). Lines starting with `#` are skipped.
pub fn read_dataset(path: &Path) -> Result<TrainingData, CliError> {
    let cfg_err = |m: String| CliError::Config(format!("{}: {m}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| cfg_err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| cfg_err(e.to_string()))?.clone();
    let find = |names: &[&str]| names.iter().find_map(|n| headers.iter().position(|h| h == *n));
    let (Some(si), Some(wi)) = (find(&["s_m", "s_hat_m"]), find(&["w_m", "w_smooth_m"])) else {
        return Err(cfg_err("need columns `s_m,w_m` or `s_hat_m,w_smooth_m`".into()));
    };
    let (mut inputs, mut targets) = (Vec::new(), Vec::new());
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| cfg_err(e.to_string()))?;
        let field = |i: usize| -> Result<f64, CliError> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| cfg_err(format!("record {}: bad number in column {}", line + 1, i + 1)))
        };
        inputs.push(field(si)?);
        targets.push(field(wi)?);
    }
    if inputs.len() < 2 {
        return Err(cfg_err(format!("need at least 2 rows, got {}", inputs.len())));
    }
    Ok(TrainingData::new(inputs, targets))
}

fn cmd_gpfit(args: &GpfitArgs) -> Result<(), CliError> {
    let data = read_dataset(&args.data)?;
    let mut options = FitOptions {
        seed: args.seed,
        ..FitOptions::default()
    };
    if let Some(r) = args.restarts {
        options.restarts = r.max(1);
    }
    let init = GpHyperParams::from_data(&data.inputs, &data.targets);
    let model = fit(data, args.mode, init, &options)?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("model.json"), model.to_json()?)?;

    let (lo, hi) = model
        .data
        .inputs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), s| (l.min(*s), h.max(*s)));
    let m = 4 * (model.len() - 1) + 1;
    let grid: Vec<f64> = (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect();
    let p = model.predict(&grid);
    let std = p.std();
    let rows = (0..m).map(|i| vec![Cell::from(grid[i]), p.mean[i].into(), std[i].into()]);
    write_csv_rows(
        fs::File::create(args.out.join("prediction.csv"))?,
        &["s_m", "mean_m", "std_m"],
        rows,
    )?;
    println!(
        "fitted {} hyperparameters {:?}",
        model.mode.label(),
        model.hyper
    );
    Ok(())
}

fn cmd_resume(args: &ResumeArgs) -> Result<(), CliError> {
    let cfg = load_or_default(args.config.as_deref())?;
    let seed = args.seed_offset.unwrap_or(cfg.seed_offset);
    let text = fs::read_to_string(&args.state).map_err(|e| CliError::Config(format!("{}: {e}", args.state.display())))?;
    let cloud = CloudState::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", args.state.display())))?;
    let scenario = cfg.scenario(seed)?;
    let fleet = simulate_fleet(&scenario)?;
    let result = resume_procedure(&scenario, &fleet, cloud)?;
    let m = manifest(&cfg, &cfg.hash(), seed, &scenario);
    result.write_dir(&args.out, &m)?;
    println!(
        "resumed with {} new vehicles into {}",
        result.traces.len(),
        args.out.display()
    );
    Ok(())
}
