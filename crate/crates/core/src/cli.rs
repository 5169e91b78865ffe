//! The `scsf` command-line tool.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use chrono::{NaiveDate, NaiveDateTime};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Result, ScsfError};
use crate::model::{FitConfig, LowRankModel, YEAR};
use crate::solver::{fit, fit_weights, FitReport};
use crate::synthetic::{corrupt, generate, Corruption, SyntheticSpec};
use crate::timeseries::{ingest_csv, to_matrix, ColumnSpec, PowerMatrix, PowerSeries};
use crate::validation::{empirical_cdf, holdout_fit, ks_statistic, ks_threshold, split_days, Ecdf};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILED_CHECK: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "scsf", version, about = "Clear-sky baseline estimation for PV power data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a clear-sky model to a power CSV
    Fit(FitArgs),
    /// Hold out random days and compare train/test residual distributions
    Validate(ValidateArgs),
    /// Write a synthetic clear-sky data set and a corrupted copy
    Synth(SynthArgs),
    /// Compute the per-day clear-sky weights only
    Weights(WeightsArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// CSV file with a header row
    #[arg(long)]
    pub input: PathBuf,
    /// Timestamp column (name or zero-based index)
    #[arg(long, default_value = "timestamp")]
    pub ts_col: String,
    /// Power column (name or zero-based index)
    #[arg(long, default_value = "power")]
    pub power_col: String,
}

#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    /// TOML file overriding the built-in defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub mu_l: Option<f64>,
    #[arg(long)]
    pub mu_r: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub rel_tol: Option<f64>,
    /// Half-width in days of the neighbourhood for the energy reference
    #[arg(long)]
    pub weight_window: Option<usize>,
    /// Energy ratio at which a day starts to receive weight
    #[arg(long)]
    pub energy_ramp_lo: Option<f64>,
    /// Energy ratio at which a day reaches full energy score
    #[arg(long)]
    pub energy_ramp_hi: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Accepted for symmetry with the other commands; fitting is deterministic
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Fraction of days held out
    #[arg(long, default_value_t = 0.1)]
    pub test_frac: f64,
    /// Significance level of the pass/fail decision
    #[arg(long, default_value_t = 1e-10)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 365)]
    pub days: usize,
    #[arg(long, default_value_t = 288)]
    pub samples_per_day: usize,
    #[arg(long, default_value_t = 5.0)]
    pub peak_power: f64,
    #[arg(long, default_value_t = 0.25)]
    pub latitude_proxy: f64,
    /// Fractional output loss per year
    #[arg(long, default_value_t = 0.0)]
    pub degradation: f64,
    /// Fraction of days to corrupt
    #[arg(long, default_value_t = 0.3)]
    pub corrupt_frac: f64,
    #[arg(long, default_value_t = 0.0)]
    pub factor_min: f64,
    #[arg(long, default_value_t = 1.1)]
    pub factor_max: f64,
    /// Draw one corruption factor per day instead of per sample
    #[arg(long)]
    pub per_day_factors: bool,
    /// First timestamp of the series
    #[arg(long, default_value = "2020-01-01T00:00:00")]
    pub start: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct WeightsArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: serde_json::Value,
    inputs: Vec<InputChecksum>,
    seed: u64,
    artifacts: Vec<String>,
    duration_seconds: f64,
}

#[derive(Debug, Serialize)]
struct InputChecksum {
    path: String,
    sha256: String,
}

/// Parse the process arguments and run; the return value is the exit code.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &ScsfError) -> u8 {
    match e {
        ScsfError::Numeric(_) | ScsfError::Degenerate(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Fit(args) => cmd_fit(&args),
        Command::Validate(args) => cmd_validate(&args),
        Command::Synth(args) => cmd_synth(&args),
        Command::Weights(args) => cmd_weights(&args),
    }
}

/// Defaults, then the config file, then explicit flags.
pub fn resolve_config(args: &ConfigArgs) -> Result<FitConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| ScsfError::io(path, e))?;
            FitConfig::overlay(&text).map_err(|e| ScsfError::Config(format!("{}: {e}", path.display())))?
        }
        None => FitConfig::default(),
    };
    if let Some(k) = args.k {
        config.k = k;
    }
    if let Some(tau) = args.tau {
        config.tau = tau;
    }
    if args.mu_l.is_some() {
        config.mu_l = args.mu_l;
    }
    if args.mu_r.is_some() {
        config.mu_r = args.mu_r;
    }
    if args.epsilon.is_some() {
        config.epsilon = args.epsilon;
    }
    if let Some(v) = args.max_iter {
        config.max_iter = v;
    }
    if let Some(v) = args.rel_tol {
        config.rel_tol = v;
    }
    if let Some(v) = args.weight_window {
        config.weights.window = v;
    }
    if let Some(v) = args.energy_ramp_lo {
        config.weights.energy_ramp.0 = v;
    }
    if let Some(v) = args.energy_ramp_hi {
        config.weights.energy_ramp.1 = v;
    }
    config.validate()?;
    Ok(config)
}

fn load_series(args: &InputArgs) -> Result<PowerSeries> {
    let file = fs::File::open(&args.input).map_err(|e| ScsfError::io(&args.input, e))?;
    ingest_csv(file, &ColumnSpec::parse(&args.ts_col), &ColumnSpec::parse(&args.power_col))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| ScsfError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| ScsfError::io(dir, e))?;
        Ok(Outputs { dir: dir.to_path_buf(), written: Vec::new() })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| ScsfError::io(&path, e))?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn finish(mut self, command: &str, config: serde_json::Value, inputs: &[&Path], seed: u64, started: Instant) -> Result<()> {
        let inputs = inputs
            .iter()
            .map(|p| Ok(InputChecksum { path: p.display().to_string(), sha256: sha256_file(p)? }))
            .collect::<Result<Vec<_>>>()?;
        self.written.push("manifest.json".into());
        let manifest = Manifest {
            command,
            config,
            inputs,
            seed,
            artifacts: self.written.clone(),
            duration_seconds: started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = self.dir.join("manifest.json");
        fs::write(&path, text + "\n").map_err(|e| ScsfError::io(&path, e))
    }
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("value serializes")
}

fn grid_csv(mat: &nalgebra::DMatrix<f64>, observed: Option<&nalgebra::DMatrix<bool>>) -> String {
    let mut s = String::new();
    for i in 0..mat.nrows() {
        let row: Vec<String> = (0..mat.ncols())
            .map(|j| match observed {
                Some(o) if !o[(i, j)] => String::new(),
                _ => format!("{:?}", mat[(i, j)]),
            })
            .collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

fn fmt_ts(t: NaiveDateTime) -> String {
    t.format("%Y-%m-%dT%H:%M:%S").to_string()
}

/// One row per input sample: timestamp, measured, clear_sky, residual.
fn series_csv(series: &PowerSeries, estimate: &nalgebra::DMatrix<f64>) -> String {
    let m = series.samples_per_day();
    let offset = series.day_offset();
    let mut s = String::from("timestamp,measured,clear_sky,residual\n");
    for (t, v) in series.values.iter().enumerate() {
        let pos = offset + t;
        let cs = estimate[(pos % m, pos / m)];
        let ts = fmt_ts(series.timestamp(t));
        match v {
            Some(v) => {
                let _ = writeln!(s, "{ts},{v:?},{cs:?},{:?}", v - cs);
            }
            None => {
                let _ = writeln!(s, "{ts},,{cs:?},");
            }
        }
    }
    s
}

fn report_text(report: &FitReport, model: &LowRankModel) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "converged: {}", report.converged);
    let _ = writeln!(s, "iterations: {}", report.iterations);
    let _ = writeln!(s, "rank: {}", model.k());
    let _ = writeln!(s, "matrix: {} samples/day x {} days", model.m(), model.n());
    let _ = writeln!(s, "night rows: {}", report.night_rows.len());
    let _ = writeln!(s, "mu_l: {:?}", report.mu_l);
    let _ = writeln!(s, "mu_r: {:?}", report.mu_r);
    let _ = writeln!(s, "epsilon: {:?}", report.epsilon);
    if report.relaxed_weights {
        let _ = writeln!(s, "note: clear-day energy floor was relaxed to find enough usable days");
    }
    let _ = writeln!(s, "objective (total, f1, f2, f3, f4):");
    for (t, p) in report.objective_trace.iter().enumerate() {
        let _ = writeln!(s, "  {t:3} {:?} {:?} {:?} {:?} {:?}", p.total, p.f1, p.f2, p.f3, p.f4);
    }
    let capped = report.subproblem_stats.iter().filter(|r| !r.stats.converged).count();
    let _ = writeln!(s, "subproblems: {} solved, {capped} stopped at the iteration cap", report.subproblem_stats.len());
    if let Some(beta) = report.beta {
        let _ = writeln!(s, "beta: {beta:?}");
    }
    if let Some(rate) = report.degradation_rate {
        let _ = writeln!(s, "annual degradation rate: {rate:?}");
    }
    s
}

fn fit_matrix(series: &PowerSeries) -> Result<PowerMatrix> {
    let matrix = to_matrix(series)?;
    if matrix.observed_count() == 0 {
        return Err(ScsfError::Degenerate("input has no observed samples".into()));
    }
    Ok(matrix)
}

pub fn cmd_fit(args: &FitArgs) -> Result<u8> {
    let started = Instant::now();
    let config = resolve_config(&args.config)?;
    let series = load_series(&args.input)?;
    let matrix = fit_matrix(&series)?;
    let (model, report) = fit(&matrix, &config)?;
    let estimate = model.clear_sky();

    let mut out = Outputs::new(&args.out_dir)?;
    out.write("clear_sky.csv", &series_csv(&series, &estimate))?;
    let mut model_bytes = Vec::new();
    model.write_to(&mut model_bytes).map_err(|e| ScsfError::io(args.out_dir.join("model.scsf"), e))?;
    out.write("model.scsf", &String::from_utf8(model_bytes).expect("model file is UTF-8"))?;
    out.write("report.json", &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    out.write("report.txt", &report_text(&report, &model))?;
    out.write("measured_grid.csv", &grid_csv(&matrix.data, Some(&matrix.observed)))?;
    out.write("estimated_grid.csv", &grid_csv(&estimate, None))?;
    if model.n() > YEAR {
        let summary = serde_json::json!({
            "beta": report.beta,
            "annual_degradation_rate": report.degradation_rate,
        });
        out.write("degradation.json", &(serde_json::to_string_pretty(&summary).expect("json") + "\n"))?;
    }
    out.finish("fit", to_json(&config), &[&args.input.input], args.seed, started)?;
    Ok(EXIT_OK)
}

fn cdf_csv(f: &Ecdf) -> String {
    let mut s = String::from("value,cumulative_fraction\n");
    for (v, p) in f.steps() {
        let _ = writeln!(s, "{v:?},{p:?}");
    }
    s
}

pub fn cmd_validate(args: &ValidateArgs) -> Result<u8> {
    let started = Instant::now();
    let config = resolve_config(&args.config)?;
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(ScsfError::Config(format!("--alpha must be in (0, 1), got {}", args.alpha)));
    }
    let series = load_series(&args.input)?;
    let matrix = fit_matrix(&series)?;
    let (_, test_days) = split_days(matrix.n(), args.test_frac, args.seed)?;
    let holdout = holdout_fit(&matrix, &config, &test_days)?;
    let (train, test) = (&holdout.train.values, &holdout.test.values);
    if train.is_empty() || test.is_empty() {
        return Err(ScsfError::Degenerate("a residual set is empty; no daytime samples on one side of the split".into()));
    }
    let ks = ks_statistic(train, test)?;
    let loose = ks_threshold(0.05, train.len(), test.len())?;
    let strict = ks_threshold(args.alpha, train.len(), test.len())?;
    let pass = ks < strict;

    let mut out = Outputs::new(&args.out_dir)?;
    out.write("cdf_train.csv", &cdf_csv(&empirical_cdf(train)?))?;
    out.write("cdf_test.csv", &cdf_csv(&empirical_cdf(test)?))?;
    let summary = format!(
        "ks {ks:?} threshold_0.05 {loose:?} threshold_alpha {strict:?} alpha {:?} n_train {} n_test {} test_days {} result {}\n",
        args.alpha,
        train.len(),
        test.len(),
        test_days.len(),
        if pass { "pass" } else { "fail" }
    );
    out.write("summary.txt", &summary)?;
    print!("{summary}");
    let mut config_json = to_json(&config);
    config_json["test_frac"] = serde_json::json!(args.test_frac);
    config_json["alpha"] = serde_json::json!(args.alpha);
    out.finish("validate", config_json, &[&args.input.input], args.seed, started)?;
    Ok(if pass { EXIT_OK } else { EXIT_FAILED_CHECK })
}

fn parse_start(s: &str) -> Result<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDate::parse_from_str(s, "%Y-%m-%d").map(|d| d.and_hms_opt(0, 0, 0).expect("midnight")))
        .map_err(|_| ScsfError::Config(format!("cannot parse start time {s:?}")))
}

fn matrix_series_csv(mat: &nalgebra::DMatrix<f64>, start: NaiveDateTime, period: u32) -> String {
    let mut s = String::from("timestamp,power\n");
    for (t, v) in mat.as_slice().iter().enumerate() {
        let ts = start + chrono::Duration::seconds(t as i64 * period as i64);
        let _ = writeln!(s, "{},{v:?}", fmt_ts(ts));
    }
    s
}

pub fn cmd_synth(args: &SynthArgs) -> Result<u8> {
    let started = Instant::now();
    let spec = SyntheticSpec {
        days: args.days,
        samples_per_day: args.samples_per_day,
        peak_power: args.peak_power,
        latitude_proxy: args.latitude_proxy,
        shade: None,
        degradation_rate: args.degradation,
        seed: args.seed,
    };
    let corruption = Corruption {
        day_fraction: args.corrupt_frac,
        factor_range: (args.factor_min, args.factor_max),
        per_day: args.per_day_factors,
        seed: args.seed,
    };
    if 86_400 % args.samples_per_day != 0 {
        return Err(ScsfError::Config(format!("{} samples per day do not divide a day into whole seconds", args.samples_per_day)));
    }
    let start = parse_start(&args.start)?;
    let (clean, truth) = generate(&spec)?;
    let dirty = corrupt(&clean, &corruption)?;
    let period = (86_400 / args.samples_per_day) as u32;

    let mut out = Outputs::new(&args.out_dir)?;
    out.write("clean.csv", &matrix_series_csv(&clean.data, start, period))?;
    out.write("corrupted.csv", &matrix_series_csv(&dirty.data, start, period))?;
    out.write("truth.csv", &matrix_series_csv(&truth, start, period))?;
    let days: Vec<String> = corruption.selected_days(args.days).iter().map(|d| d.to_string()).collect();
    out.write("corrupted_days.txt", &(days.join("\n") + "\n"))?;
    let sidecar = serde_json::json!({ "spec": spec, "corruption": corruption, "start": fmt_ts(start) });
    out.write("synth_spec.json", &(serde_json::to_string_pretty(&sidecar).expect("json") + "\n"))?;
    out.finish("synth", sidecar, &[], args.seed, started)?;
    Ok(EXIT_OK)
}

pub fn cmd_weights(args: &WeightsArgs) -> Result<u8> {
    let started = Instant::now();
    let config = resolve_config(&args.config)?;
    let series = load_series(&args.input)?;
    let matrix = fit_matrix(&series)?;
    let (weights, relaxed) = fit_weights(&matrix, &config)?;
    let first_day = series.start.date();
    let mut s = String::from("day,date,weight,energy_score,smoothness_score\n");
    for j in 0..weights.len() {
        let date = first_day + chrono::Duration::days(j as i64);
        let _ = writeln!(
            s,
            "{j},{date},{:?},{:?},{:?}",
            weights.values[j], weights.energy_score[j], weights.smoothness_score[j]
        );
    }
    let mut out = Outputs::new(&args.out_dir)?;
    out.write("weights.csv", &s)?;
    let mut config_json = to_json(&config.weights);
    config_json["relaxed"] = serde_json::json!(relaxed);
    out.finish("weights", config_json, &[&args.input.input], args.seed, started)?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_overlays_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "k = 3\n[weights]\nwindow = 5\n").unwrap();
        let args = ConfigArgs { config: Some(path), tau: Some(0.8), energy_ramp_hi: Some(0.9), ..Default::default() };
        let c = resolve_config(&args).unwrap();
        let d = FitConfig::default();
        assert_eq!(c.k, 3);
        assert_eq!(c.tau, 0.8);
        assert_eq!(c.weights.window, 5);
        assert_eq!(c.weights.energy_ramp, (d.weights.energy_ramp.0, 0.9));
        assert_eq!(c.weights.roughness_window, d.weights.roughness_window);
        assert_eq!(c.max_iter, d.max_iter);
    }

    #[test]
    fn zero_rank_is_rejected() {
        let args = ConfigArgs { k: Some(0), ..Default::default() };
        assert!(matches!(resolve_config(&args), Err(ScsfError::Config(_))));
        let args = ConfigArgs { energy_ramp_lo: Some(0.99), ..Default::default() };
        assert!(matches!(resolve_config(&args), Err(ScsfError::Config(_))));
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&ScsfError::Numeric("x".into())), EXIT_NUMERIC);
        assert_eq!(exit_code(&ScsfError::Config("x".into())), EXIT_USAGE);
    }
}
