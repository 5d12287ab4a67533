//! Command-line front end: `sweep`, `leakage`, `rootswap-prob` and `single`.
//!
//! Exit codes: 0 on success, 1 for configuration or I/O problems, 2 when the
//! numerics fail.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::DoaError;
use crate::estimator::{DoaEstimator, EstimationContext};
use crate::experiments::{
    base_estimator, build_estimator, run_leakage, run_monte_carlo, run_rootswap_probability, LeakageRow,
    MetricsTable, RootSwapRow,
};
use crate::array_model::generate_snapshots;
use crate::parallel::Execution;
use crate::subspace::sample_covariance;
use crate::two_step::two_step_from_covariance;

pub const SWEEP_FILE: &str = "sweep.csv";
pub const LEAKAGE_FILE: &str = "leakage.csv";
pub const ROOTSWAP_FILE: &str = "rootswap_prob.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";

pub const SWEEP_HEADER: [&str; 11] = [
    "method",
    "snr_db",
    "mse",
    "cmse",
    "resolution_prob",
    "rootswap_prob",
    "mlfail_prob",
    "leakage_step1",
    "leakage_step2",
    "crb_trace",
    "trials_used",
];
pub const LEAKAGE_HEADER: [&str; 7] = [
    "snr_db",
    "gamma",
    "empirical_step1",
    "theory_step1",
    "empirical_step2",
    "theory_step2",
    "trials_used",
];
pub const ROOTSWAP_HEADER: [&str; 6] = [
    "snr_db",
    "approx_probability",
    "empirical_rootswap",
    "empirical_mlfail",
    "low_quality",
    "trials_used",
];

#[derive(Debug, Parser)]
#[command(name = "subspace-doa", version, about = "Small-sample root-MUSIC DOA experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// MSE, CMSE, resolution and root-event statistics per method and SNR.
    Sweep(RunArgs),
    /// Simulated subspace leakage against the closed-form predictions.
    Leakage(RunArgs),
    /// Root-swap probability approximation against simulation.
    #[command(name = "rootswap-prob")]
    RootswapProb(RunArgs),
    /// One estimate from the [single] section, with roots and SML scores.
    Single(SingleArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the configured trial count.
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Debug, Args)]
struct SingleArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numeric(_) => 2,
        }
    }
}

impl From<DoaError> for CliError {
    fn from(e: DoaError) -> Self {
        use DoaError::*;
        match e {
            InvalidConfig(_)
            | InvalidGammaGrid(_)
            | GammaOutOfRange(_)
            | InfeasiblePlan { .. }
            | InvalidScenario(_)
            | InvalidGeometry(_)
            | AngleOutOfRange(_)
            | NotPositiveSemidefinite { .. }
            | EmptySnapshots => CliError::Config(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Sweep(args) => batch(&args, "sweep", |config, out| {
            let table = run_monte_carlo(&config.experiment, Execution::Parallel)?;
            write_metrics_csv(&table, &out.join(SWEEP_FILE))?;
            for row in &table.rows {
                println!(
                    "{:<18} {:>7.2} dB  mse {:.3e}  resolved {:.3}  used {}",
                    row.method, row.snr_db, row.mse, row.resolution_prob, row.trials_used
                );
            }
            Ok(vec![SWEEP_FILE])
        }),
        Command::Leakage(args) => batch(&args, "leakage", |config, out| {
            let rows = run_leakage(&config.experiment, Execution::Parallel)?;
            write_leakage_csv(&rows, &out.join(LEAKAGE_FILE))?;
            for row in &rows {
                println!(
                    "{:>7.2} dB  rho1 {:.4e} (theory {:.4e})  rho2 {:.4e} (theory {:.4e}, gamma {:.2})",
                    row.snr_db, row.empirical_step1, row.theory_step1, row.empirical_step2, row.theory_step2, row.gamma
                );
            }
            Ok(vec![LEAKAGE_FILE])
        }),
        Command::RootswapProb(args) => batch(&args, "rootswap-prob", |config, out| {
            let rows = run_rootswap_probability(&config.experiment, Execution::Parallel)?;
            write_rootswap_csv(&rows, &out.join(ROOTSWAP_FILE))?;
            for row in &rows {
                println!(
                    "{:>7.2} dB  approx {:.4}  root-swap {:.4}  ML failure {:.4}",
                    row.snr_db, row.approx_probability, row.empirical_rootswap, row.empirical_mlfail
                );
            }
            Ok(vec![ROOTSWAP_FILE])
        }),
        Command::Single(args) => single(&args),
    }
}

fn batch<F>(args: &RunArgs, name: &str, run: F) -> Result<(), CliError>
where
    F: FnOnce(&RunConfig, &Path) -> Result<Vec<&'static str>, CliError> + Send,
{
    let started = Instant::now();
    let mut config = RunConfig::load(&args.config)?;
    if let Some(trials) = args.trials {
        config.experiment.trials = trials;
        config.experiment.validate()?;
    }
    std::fs::create_dir_all(&args.out).map_err(|e| io_error(&args.out, e))?;
    let loaded = started.elapsed();

    let outputs = with_threads(args.threads, || run(&config, &args.out))??;
    let total = started.elapsed();

    let mut manifest = String::new();
    let _ = writeln!(manifest, "tool: subspace-doa {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(manifest, "command: {name}");
    let _ = writeln!(manifest, "config: {}", args.config.display());
    let _ = writeln!(manifest, "output: {}", args.out.display());
    let _ = writeln!(manifest, "files: {}", outputs.join(","));
    let threads = args.threads.map_or_else(|| "default".to_string(), |t| t.to_string());
    let _ = writeln!(manifest, "threads: {threads}");
    let _ = writeln!(manifest, "load_seconds: {:.3}", loaded.as_secs_f64());
    let _ = writeln!(manifest, "run_seconds: {:.3}", (total - loaded).as_secs_f64());
    let _ = writeln!(manifest, "\n; resolved configuration\n{}", config.to_ini_string());
    let path = args.out.join(MANIFEST_FILE);
    std::fs::write(&path, manifest).map_err(|e| io_error(&path, e))?;
    Ok(())
}

#[cfg(feature = "parallel")]
fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    match threads {
        Some(0) => Err(CliError::Config("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    if threads == Some(0) {
        return Err(CliError::Config("--threads must be at least 1".into()));
    }
    Ok(f())
}

fn single(args: &SingleArgs) -> Result<(), CliError> {
    let config = RunConfig::load(&args.config)?;
    let single = &config.single;
    let exp = &config.experiment;
    let scenario = if single.noiseless {
        exp.scenario.noiseless_scenario(single.snr_db)?
    } else {
        exp.scenario.scenario(single.snr_db)?
    };
    let x = generate_snapshots(&scenario, single.seed)?;
    let r = sample_covariance(&x)?;
    let ctx = EstimationContext {
        sample_covariance: r.matrix(),
        snapshots: &x,
        num_sources: scenario.num_sources(),
        geometry: scenario.geometry,
        seed: single.seed,
    };
    let estimate = build_estimator(single.method, &exp.params)?.estimate(r.matrix(), &ctx)?;

    let mut out = String::new();
    let _ = writeln!(out, "method: {}", single.method);
    let _ = writeln!(out, "snr: {} dB, seed {}, noiseless {}", single.snr_db, single.seed, single.noiseless);
    let degrees: Vec<String> = estimate.doa.degrees().iter().map(|d| format!("{d:.3}°")).collect();
    let _ = writeln!(out, "DOAs: {}", degrees.join(", "));
    let _ = writeln!(out, "roots (|z|, angle rad), closest to the unit circle first:");
    for (i, z) in estimate.roots.roots().iter().enumerate() {
        let mark = if estimate.selected.contains(&i) { "*" } else { " " };
        let _ = writeln!(out, "  {mark} {i}: {:.6} {:+.6}", z.norm(), z.arg());
    }
    if let Some(gamma) = estimate.gamma {
        let _ = writeln!(out, "gamma: {gamma}");
    }
    match estimate.sml {
        Some(f) => {
            let _ = writeln!(out, "SML: {f:.6e}");
        }
        None => {
            let _ = writeln!(out, "SML: unavailable");
        }
    }
    if single.method.two_step && !single.method.resampling {
        let base = base_estimator(single.method, &exp.params);
        let result = two_step_from_covariance(r.matrix(), &ctx, &exp.params.two_step, &base)?;
        let _ = writeln!(out, "SML by gamma:");
        for (gamma, f) in &result.sml_values {
            let _ = writeln!(out, "  {gamma:.2}: {f:.6e}");
        }
        if result.fell_back {
            let _ = writeln!(out, "  (step 1 DOAs could not form the cross term)");
        }
    }
    let _ = std::io::stdout().write_all(out.as_bytes());
    Ok(())
}

/// Ten significant digits; NaN becomes an empty field.
fn number(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:.9e}")
    }
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
    w.write_record(header).map_err(|e| io_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| io_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

pub fn write_metrics_csv(table: &MetricsTable, path: &Path) -> Result<(), CliError> {
    let rows = table.rows.iter().map(|r| {
        vec![
            r.method.clone(),
            number(r.snr_db),
            number(r.mse),
            number(r.cmse),
            number(r.resolution_prob),
            number(r.rootswap_prob),
            number(r.mlfail_prob),
            number(r.leakage_step1),
            number(r.leakage_step2),
            number(r.crb_trace),
            r.trials_used.to_string(),
        ]
    });
    write_rows(path, &SWEEP_HEADER, rows)
}

pub fn write_leakage_csv(rows: &[LeakageRow], path: &Path) -> Result<(), CliError> {
    let rows = rows.iter().map(|r| {
        vec![
            number(r.snr_db),
            number(r.gamma),
            number(r.empirical_step1),
            number(r.theory_step1),
            number(r.empirical_step2),
            number(r.theory_step2),
            r.trials_used.to_string(),
        ]
    });
    write_rows(path, &LEAKAGE_HEADER, rows)
}

pub fn write_rootswap_csv(rows: &[RootSwapRow], path: &Path) -> Result<(), CliError> {
    let rows = rows.iter().map(|r| {
        vec![
            number(r.snr_db),
            number(r.approx_probability),
            number(r.empirical_rootswap),
            number(r.empirical_mlfail),
            r.low_quality.to_string(),
            r.trials_used.to_string(),
        ]
    });
    write_rows(path, &ROOTSWAP_HEADER, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{compute_metrics, TrialRecord};

    #[test]
    fn empty_table_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_metrics_csv(&MetricsTable::default(), &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), format!("{}\n", SWEEP_HEADER.join(",")));
    }

    #[test]
    fn row_round_trips_through_csv_reader() {
        let record = TrialRecord {
            sq_error: 1.234_567_890_1e-5,
            resolved: true,
            root_swap: false,
            ml_failure: false,
            leakage_step1: 0.031_25,
            leakage_step2: None,
        };
        let row = compute_metrics("urm+2step", -2.5, &[Some(record), None], 7.5e-6);
        let table = MetricsTable::new(vec![row.clone()]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_metrics_csv(&table, &path).unwrap();
        let mut reader = csv::Reader::from_path(&path).unwrap();
        assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), SWEEP_HEADER);
        let parsed = reader.records().next().unwrap().unwrap();
        assert_eq!(&parsed[0], "urm+2step");
        let value = |i: usize| -> f64 { parsed[i].parse().unwrap() };
        assert_eq!(value(1), -2.5);
        assert!((value(2) - row.mse).abs() <= 1e-9 * row.mse);
        assert_eq!(value(4), 1.0);
        assert_eq!(&parsed[8], "");
        assert_eq!(&parsed[10], "1");
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(CliError::from(DoaError::InvalidConfig("x".into())).code(), 1);
        assert_eq!(CliError::from(DoaError::RootFinder { degree: 4 }).code(), 2);
        assert_eq!(run_cli(["subspace-doa", "sweep"]), 1);
        assert_eq!(run_cli(["subspace-doa", "sweep", "--config", "/nonexistent/cfg"]), 1);
    }
}
