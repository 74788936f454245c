//! The `asyncfl` command line.
//!
//! Exit codes: 0 success, 1 I/O or internal error, 2 config error,
//! 3 divergence detected, 4 compressor verification failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::compress::gamma;
use crate::compress::verify::{default_suite, verify_compressors};
use crate::config::RunConfig;
use crate::engine::{run, RunOutcome};
use crate::error::{Error, Result};
use crate::metrics::{write_json, write_results, Sidecar};
use crate::rng::{substream, Domain};
use crate::sched::{
    check_stability_condition, simulate_participation, DelayStats, ParticipationTrace,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "asyncfl",
    version,
    about = "Asynchronous federated learning simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one configuration and write `run.csv` and `run.json`.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one configuration per value of a config field.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Dotted config path, e.g. `compressor.k_frac` or `timing.window`.
        #[arg(long)]
        axis: String,
        /// Comma-separated JSON values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every compressor against its analytic contraction bound.
    VerifyCompressors {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 100)]
        d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate the participation trace of a config and export it.
    Stats {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => EXIT_CONFIG,
                _ => EXIT_ERROR,
            }
        }
    }
}

/// Runs a parsed command and returns its exit code.
pub fn execute(command: &Command) -> Result<i32> {
    match command {
        Command::Run { config, out } => {
            let cfg = load_config(config)?;
            let outcome = run(&cfg)?;
            let sidecar = Sidecar::new(&cfg, &outcome);
            let (csv, _) = write_results(&outcome.series, &sidecar, out, "run")?;
            report_run(&csv, &outcome);
            Ok(if outcome.divergence.is_some() {
                EXIT_DIVERGED
            } else {
                EXIT_OK
            })
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => sweep(&load_config(config)?, axis, values, out),
        Command::VerifyCompressors {
            trials,
            d,
            seed,
            out,
        } => {
            let report = verify_compressors(&default_suite(*d), *d, *trials, *seed)?;
            print!("{}", report.table());
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            write_json(&out.join("verify.json"), &report)?;
            Ok(if report.passed { EXIT_OK } else { EXIT_VERIFY })
        }
        Command::Stats { config, out } => {
            let cfg = load_config(config)?;
            stats(&cfg, out)?;
            Ok(EXIT_OK)
        }
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_json(&text)
}

fn report_run(csv: &Path, outcome: &RunOutcome) {
    match &outcome.divergence {
        Some(d) => println!("diverged at round {}: {}", d.round, d.reason),
        None => println!(
            "completed {} rounds, final |grad|^2 = {:.6e}",
            outcome.rounds_completed,
            outcome.final_grad_norm_sq.unwrap_or(f64::NAN)
        ),
    }
    println!("wrote {}", csv.display());
}

/// Returns `config` with the dotted field `axis` replaced by `value`.
pub fn with_axis_value(config: &RunConfig, axis: &str, value: &Value) -> Result<RunConfig> {
    let mut root = serde_json::to_value(config).expect("config serialises");
    let mut slot = &mut root;
    for key in axis.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|obj| obj.get_mut(key))
            .ok_or_else(|| Error::config(axis, "unknown config field"))?;
    }
    *slot = value.clone();
    RunConfig::from_json(&root.to_string())
}

fn parse_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

#[derive(Debug, Serialize)]
struct SweepRow {
    point: usize,
    axis: String,
    value: String,
    stationarity_average: Option<f64>,
    final_window_average: Option<f64>,
    total_bits: u64,
    mean_participants: f64,
    tau_max: u32,
    diverged_round: Option<usize>,
}

fn sweep(base: &RunConfig, axis: &str, values: &[String], out: &Path) -> Result<i32> {
    let configs = values
        .iter()
        .map(|v| with_axis_value(base, axis, &parse_value(v)))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let summary_path = out.join("summary.csv");
    let mut summary = csv::Writer::from_path(&summary_path).map_err(|source| Error::Csv {
        path: summary_path.clone(),
        source,
    })?;
    let mut any_diverged = false;
    for (i, (cfg, value)) in configs.iter().zip(values).enumerate() {
        let outcome = run(cfg)?;
        let sidecar = Sidecar::new(cfg, &outcome);
        let (csv, _) = write_results(&outcome.series, &sidecar, out, &format!("point_{i}"))?;
        report_run(&csv, &outcome);
        any_diverged |= outcome.divergence.is_some();
        summary
            .serialize(SweepRow {
                point: i,
                axis: axis.to_string(),
                value: value.clone(),
                stationarity_average: sidecar.summary.stationarity_average,
                final_window_average: sidecar.summary.final_window_average,
                total_bits: outcome.total_bits,
                mean_participants: outcome.mean_participants,
                tau_max: outcome.delay_stats.tau_max,
                diverged_round: outcome.divergence.as_ref().map(|d| d.round),
            })
            .map_err(|source| Error::Csv {
                path: summary_path.clone(),
                source,
            })?;
    }
    summary.flush().map_err(|e| Error::io(&summary_path, e))?;
    Ok(if any_diverged { EXIT_DIVERGED } else { EXIT_OK })
}

#[derive(Debug, Serialize)]
struct TraceStats {
    seed: u64,
    n: usize,
    rounds: usize,
    delay_stats: DelayStats,
    delay_ordering_holds: bool,
    mean_participants: f64,
    participants_variance: f64,
    gamma: Option<f64>,
    stability_holds: Option<bool>,
}

/// Simulates the trace of `cfg` and writes `trace.json` and `stats.json`.
pub fn stats(cfg: &RunConfig, out: &Path) -> Result<(ParticipationTrace, DelayStats)> {
    let timing = cfg.timing.model(cfg.n)?;
    let mut rng = substream(cfg.seed, Domain::Timing, 0);
    let trace = simulate_participation(cfg.n, cfg.rounds, &timing, &mut rng)?;
    let delay_stats = DelayStats::compute(&trace);
    let mean = trace.mean_participants();
    let var = trace
        .participants
        .iter()
        .map(|s| (s.len() as f64 - mean).powi(2))
        .sum::<f64>()
        / trace.rounds() as f64;
    let g = gamma(&cfg.compressor_spec()?, cfg.dim())?;
    let report = TraceStats {
        seed: cfg.seed,
        n: cfg.n,
        rounds: cfg.rounds,
        delay_stats,
        delay_ordering_holds: delay_stats.ordering_holds(),
        mean_participants: mean,
        participants_variance: var,
        gamma: g,
        stability_holds: g.map(|g| check_stability_condition(g, delay_stats.tau_max)),
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("trace.json"), &trace)?;
    write_json(&out.join("stats.json"), &report)?;
    println!(
        "tau_max = {}, tau_avg0 = {:.4}, mean |S_t| = {:.3}",
        delay_stats.tau_max, delay_stats.tau_avg0, mean
    );
    Ok((trace, delay_stats))
}
