//! Per-round measurements, summary statistics and result files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compress::{payload_bits, CompressorSpec};
use crate::config::{EffectiveRates, RunConfig};
use crate::engine::{Divergence, LrGuard, RunOutcome};
use crate::error::{Error, Result};
use crate::sched::DelayStats;

pub const CSV_HEADER: [&str; 9] = [
    "t",
    "grad_norm_sq",
    "loss",
    "gap",
    "participants",
    "cum_bits",
    "ef_residual",
    "tau_max_sofar",
    "tau_avg0_sofar",
];

pub const SCHEMA_VERSION: u32 = 1;

/// State of the global model `x_t` at the start of round `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub t: usize,
    /// `‖∇f(x_t)‖²` on the full dataset.
    pub grad_norm_sq: f64,
    pub loss: f64,
    /// `f(x_t) − f(x*)` when the optimum is known.
    pub gap: Option<f64>,
    /// `|S_t|`
    pub participants: usize,
    /// Bits uploaded in rounds `0..t`.
    pub cum_bits: u64,
    /// Mean `‖e_i‖²` over clients.
    pub ef_residual: f64,
    pub tau_max_sofar: u32,
    pub tau_avg0_sofar: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSeries {
    pub rows: Vec<MetricsRow>,
}

impl MetricsSeries {
    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_csv(&mut buf, self).map_err(|source| Error::Csv {
            path: PathBuf::from("<memory>"),
            source,
        })?;
        Ok(buf)
    }
}

/// Mean of `‖∇f(x_t)‖²` over the rows with `t` in `window`.
pub fn stationarity_average(series: &MetricsSeries, window: Range<usize>) -> Result<f64> {
    let (sum, count) = series
        .rows
        .iter()
        .filter(|r| window.contains(&r.t))
        .fold((0.0, 0usize), |(s, c), r| (s + r.grad_norm_sq, c + 1));
    if count == 0 {
        return Err(Error::EmptyWindow);
    }
    Ok(sum / count as f64)
}

/// The last `frac` of `rounds` rounds, at least one round.
pub fn final_window(rounds: usize, frac: f64) -> Range<usize> {
    let len = ((rounds as f64 * frac).ceil() as usize).clamp(1, rounds.max(1));
    rounds.saturating_sub(len)..rounds
}

/// Quantity tested against a threshold for communication accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMetric {
    GradNormSq,
    Loss,
    Gap,
}

impl ThresholdMetric {
    fn value(self, row: &MetricsRow) -> Option<f64> {
        match self {
            ThresholdMetric::GradNormSq => Some(row.grad_norm_sq),
            ThresholdMetric::Loss => Some(row.loss),
            ThresholdMetric::Gap => row.gap,
        }
    }
}

/// Bits uploaded before the first row whose metric is at or below
/// `threshold`, or `None` if it never gets there.
pub fn comm_cost(series: &MetricsSeries, metric: ThresholdMetric, threshold: f64) -> Option<u64> {
    series
        .rows
        .iter()
        .find(|r| metric.value(r).is_some_and(|v| v <= threshold))
        .map(|r| r.cum_bits)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum CommRatio {
    Ratio {
        baseline_bits: u64,
        compressed_bits: u64,
        ratio: f64,
    },
    NotReached {
        baseline_reached: bool,
        compressed_reached: bool,
    },
}

/// `baseline bits / compressed bits` at the first threshold crossing.
pub fn compression_ratio(
    baseline: &MetricsSeries,
    compressed: &MetricsSeries,
    metric: ThresholdMetric,
    threshold: f64,
) -> CommRatio {
    match (
        comm_cost(baseline, metric, threshold),
        comm_cost(compressed, metric, threshold),
    ) {
        (Some(b), Some(c)) => {
            let ratio = if b == c { 1.0 } else { b as f64 / c as f64 };
            CommRatio::Ratio {
                baseline_bits: b,
                compressed_bits: c,
                ratio,
            }
        }
        (b, c) => CommRatio::NotReached {
            baseline_reached: b.is_some(),
            compressed_reached: c.is_some(),
        },
    }
}

/// Dense bits per upload divided by `spec` bits per upload.
pub fn per_round_ratio(spec: &CompressorSpec, d: usize) -> f64 {
    payload_bits(&CompressorSpec::Identity, d) as f64 / payload_bits(spec, d) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityVerdict {
    pub gamma: Option<f64>,
    pub tau_max: u32,
    /// `1 − γ ≤ 1/(2(τ_max + 1))`, absent when `γ` is unknown.
    pub holds: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rounds_completed: usize,
    pub stationarity_average: Option<f64>,
    /// Over the last quarter of the configured rounds.
    pub final_window_average: Option<f64>,
    pub final_grad_norm_sq: Option<f64>,
    pub total_bits: u64,
    pub mean_participants: f64,
}

/// JSON companion of a metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub schema: u32,
    pub config: RunConfig,
    pub compressor: CompressorSpec,
    pub dim: usize,
    pub delay_stats: DelayStats,
    pub delay_ordering_holds: bool,
    pub stability: StabilityVerdict,
    pub rates: EffectiveRates,
    pub lr_guard: Option<LrGuard>,
    pub divergence: Option<Divergence>,
    pub summary: Summary,
}

impl Sidecar {
    pub fn new(config: &RunConfig, outcome: &RunOutcome) -> Self {
        let rounds = config.rounds;
        let diverged = outcome.divergence.is_some();
        let avg = |w: Range<usize>| {
            if diverged {
                None
            } else {
                stationarity_average(&outcome.series, w).ok()
            }
        };
        Sidecar {
            schema: SCHEMA_VERSION,
            config: config.clone(),
            compressor: outcome.compressor,
            dim: outcome.final_model.len(),
            delay_stats: outcome.delay_stats,
            delay_ordering_holds: outcome.delay_stats.ordering_holds(),
            stability: StabilityVerdict {
                gamma: outcome.gamma,
                tau_max: outcome.delay_stats.tau_max,
                holds: outcome.stability_holds(),
            },
            rates: outcome.rates,
            lr_guard: outcome.lr_guard,
            divergence: outcome.divergence.clone(),
            summary: Summary {
                rounds_completed: outcome.rounds_completed,
                stationarity_average: avg(0..rounds),
                final_window_average: avg(final_window(rounds, 0.25)),
                final_grad_norm_sq: outcome.final_grad_norm_sq,
                total_bits: outcome.total_bits,
                mean_participants: outcome.mean_participants,
            },
        }
    }
}

fn write_csv<W: Write>(out: W, series: &MetricsSeries) -> std::result::Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(CSV_HEADER)?;
    for row in &series.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `<dir>/<stem>.csv` and `<dir>/<stem>.json`, creating `dir`.
pub fn write_results(
    series: &MetricsSeries,
    sidecar: &Sidecar,
    dir: &Path,
    stem: &str,
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));

    let file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_csv(BufWriter::new(file), series).map_err(|source| Error::Csv {
        path: csv_path.clone(),
        source,
    })?;

    write_json(&json_path, sidecar)?;
    Ok((csv_path, json_path))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_series(path: &Path) -> Result<MetricsSeries> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Payload(format!(
            "{}: unexpected CSV header {:?}",
            path.display(),
            header
        )));
    }
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<MetricsRow>, _>>()
        .map_err(csv_err)?;
    Ok(MetricsSeries { rows })
}

/// Loads a sidecar and re-checks its delay statistics: the stored ordering
/// flag must agree with the stored values, and a trace claimed to satisfy
/// the ordering must actually do so.
pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if sidecar.schema != SCHEMA_VERSION {
        return Err(Error::Payload(format!(
            "{}: unsupported schema {}",
            path.display(),
            sidecar.schema
        )));
    }
    let holds = sidecar.delay_stats.ordering_holds();
    if sidecar.delay_ordering_holds && !holds {
        return Err(Error::OrderingViolation(sidecar.delay_stats));
    }
    if holds != sidecar.delay_ordering_holds {
        return Err(Error::Payload(format!(
            "{}: delay_ordering_holds disagrees with delay_stats",
            path.display()
        )));
    }
    Ok(sidecar)
}
