//! Empirical check of every compressor against its analytic guarantee.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{
    beta, compress, contraction_estimate, gamma, payload_bits, sign_gamma, CompressedPayload,
    CompressorSpec, ContractionEstimate,
};
use crate::error::Result;
use crate::params::ParamVector;
use crate::rng::{substream, Domain, SimRng};

/// Repetitions of a randomized compressor per Gaussian input.
const INNER: usize = 8;
/// Inputs used for the wire round-trip check.
const ROUNDTRIP_SAMPLES: usize = 16;
/// Slack for deterministic bounds, covering summation rounding.
const FLOAT_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    /// No analytic bound to test against.
    Informational,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRow {
    pub compressor: CompressorSpec,
    pub name: String,
    pub analytic_gamma: Option<f64>,
    /// What the ratio is compared against, and how.
    pub bound: Option<f64>,
    pub criterion: String,
    pub estimate: ContractionEstimate,
    /// Unbiasedness check, for plain QSGD.
    pub bias: Option<BiasCheck>,
    pub roundtrip_ok: bool,
    pub bits_per_payload: u64,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub d: usize,
    pub trials: usize,
    pub seed: u64,
    pub rows: Vec<VerifyRow>,
    pub passed: bool,
}

/// The operators checked by default at dimension `d`.
pub fn default_suite(d: usize) -> Vec<CompressorSpec> {
    let k = |frac: f64| ((frac * d as f64).round() as usize).clamp(1, d);
    vec![
        CompressorSpec::Identity,
        CompressorSpec::Topk { k: k(0.03) },
        CompressorSpec::Topk { k: k(0.1) },
        CompressorSpec::SignScaled,
        CompressorSpec::SignRaw,
        CompressorSpec::Qsgd { s: 4 },
        CompressorSpec::TopkThenQsgd { k: k(0.03), s: 3 },
        CompressorSpec::TopkThenQsgd { k: k(0.1), s: 4 },
    ]
}

fn gaussian(d: usize, rng: &mut SimRng) -> ParamVector {
    ParamVector::from_vec((0..d).map(|_| rng.sample(StandardNormal)).collect())
}

fn roundtrip_ok(spec: &CompressorSpec, d: usize, rng: &mut SimRng) -> Result<bool> {
    for _ in 0..ROUNDTRIP_SAMPLES {
        let p = compress(spec, &gaussian(d, rng), rng);
        let bytes = p.to_wire();
        let bits = p.bit_cost();
        if bits != payload_bits(spec, d) || bytes.len() as u64 != bits.div_ceil(8) {
            return Ok(false);
        }
        if CompressedPayload::from_wire(&bytes, spec, d)? != p.at_wire_precision() {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Largest per-input `‖x − C(x)‖²/‖x‖² − (1 − γ(x))` for the scaled sign.
fn sign_scaled_excess(d: usize, trials: usize, rng: &mut SimRng) -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..trials {
        let x = gaussian(d, rng);
        let c = compress(&CompressorSpec::SignScaled, &x, rng).decode();
        let ratio = x.sub(&c)?.norm_sq() / x.norm_sq();
        worst = worst.max(ratio - (1.0 - sign_gamma(&x)));
    }
    Ok(worst)
}

/// Outcome of the QSGD unbiasedness check on one fixed input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasCheck {
    /// Largest per-coordinate `|mean − x_i| / SE_i`.
    pub max_z: f64,
    /// Per-coordinate limit that holds the two-sided 3-SE confidence level
    /// jointly over all coordinates.
    pub z_limit: f64,
    /// Coordinates beyond 3 SE, and the count expected by chance.
    pub beyond_3se: usize,
    pub expected_beyond_3se: f64,
    /// `Σ z_i²` and its acceptance band `m ± 3√(2m)` over the `m` random coordinates.
    pub chi2: f64,
    pub chi2_band: (f64, f64),
    pub passed: bool,
}

/// Two-sided tail mass beyond 3 standard errors.
fn three_se_tail() -> f64 {
    2.0 * Normal::standard().cdf(-3.0)
}

/// Per-coordinate z limit whose joint coverage over `m` independent
/// coordinates equals the single-coordinate 3-SE coverage.
pub fn familywise_z_limit(m: usize) -> f64 {
    let per = 1.0 - (1.0 - three_se_tail()).powf(1.0 / m.max(1) as f64);
    -Normal::standard().inverse_cdf(per / 2.0)
}

/// Averages `trials` draws of plain QSGD on one Gaussian `x` and compares
/// each coordinate with `x_i`. `SE_i` is exact: coordinate `i` is `‖x‖/s`
/// times a level that rounds up with probability `p_i`, so its variance is
/// `(‖x‖/s)² p_i (1 − p_i)`.
fn qsgd_bias(s: u32, d: usize, trials: usize, rng: &mut SimRng) -> Result<BiasCheck> {
    let spec = CompressorSpec::Qsgd { s };
    let x = gaussian(d, rng);
    let norm = x.norm();
    let mut sum = vec![0.0; d];
    for _ in 0..trials {
        compress(&spec, &x, rng).add_into(1.0, &mut sum);
    }
    let step = norm / s as f64;
    let (mut max_z, mut chi2, mut beyond, mut random_coords) = (0.0f64, 0.0, 0usize, 0usize);
    for (total, &xi) in sum.iter().zip(x.iter()) {
        let mean = total / trials as f64;
        let scaled = s as f64 * xi.abs() / norm;
        let p = scaled - scaled.floor();
        let se = step * (p * (1.0 - p) / trials as f64).sqrt();
        let err = (mean - xi).abs();
        let z = if se > 0.0 {
            random_coords += 1;
            err / se
        } else if err <= FLOAT_SLACK * xi.abs().max(1.0) {
            0.0
        } else {
            f64::INFINITY
        };
        max_z = max_z.max(z);
        chi2 += z * z;
        beyond += (z > 3.0) as usize;
    }
    let m = random_coords as f64;
    let half = 3.0 * (2.0 * m).sqrt();
    let chi2_band = ((m - half).max(0.0), m + half);
    let z_limit = familywise_z_limit(random_coords);
    Ok(BiasCheck {
        max_z,
        z_limit,
        beyond_3se: beyond,
        expected_beyond_3se: m * three_se_tail(),
        chi2,
        chi2_band,
        passed: max_z <= z_limit && chi2 >= chi2_band.0 && chi2 <= chi2_band.1,
    })
}

pub fn verify_compressor(
    spec: &CompressorSpec,
    d: usize,
    trials: usize,
    rng: &mut SimRng,
) -> Result<VerifyRow> {
    let analytic_gamma = gamma(spec, d)?;
    let estimate = contraction_estimate(spec, d, trials, INNER, rng)?;
    let upper = |bound: f64| estimate.mean_ratio <= bound + 3.0 * estimate.std_err;
    let mut bias = None;
    let (bound, criterion, ok) = match *spec {
        CompressorSpec::Identity => (
            Some(0.0),
            "max ratio = 0".to_string(),
            Some(estimate.max_ratio == 0.0),
        ),
        CompressorSpec::Topk { k } => {
            let b = 1.0 - k as f64 / d as f64;
            (
                Some(b),
                "max ratio <= 1 - k/d".into(),
                Some(estimate.max_ratio <= b + FLOAT_SLACK),
            )
        }
        CompressorSpec::SignScaled => {
            let excess = sign_scaled_excess(d, trials, rng)?;
            (
                Some(1.0 - 1.0 / d as f64),
                "per-input ratio <= 1 - |x|_1^2/(d |x|_2^2)".into(),
                Some(
                    excess <= FLOAT_SLACK
                        && estimate.max_ratio <= 1.0 - 1.0 / d as f64 + FLOAT_SLACK,
                ),
            )
        }
        CompressorSpec::SignRaw => (None, "no analytic gamma".into(), None),
        CompressorSpec::Qsgd { s } => {
            let b = beta(d, s);
            let check = qsgd_bias(s, d, trials, rng)?;
            bias = Some(check);
            (
                Some(b),
                "mean ratio <= beta_{d,s} + 3 SE; per-coordinate bias within 3 SE jointly".into(),
                Some(upper(b) && check.passed),
            )
        }
        CompressorSpec::TopkThenQsgd { .. } => {
            let b = 1.0 - analytic_gamma.expect("composed operator has a gamma");
            (
                Some(b),
                "mean ratio <= 1 - k/(d(1 + beta_{k,s})) + 3 SE".into(),
                Some(upper(b)),
            )
        }
    };
    let roundtrip = roundtrip_ok(spec, d, rng)?;
    let status = match ok {
        None if roundtrip => Status::Informational,
        Some(true) if roundtrip => Status::Pass,
        _ => Status::Fail,
    };
    Ok(VerifyRow {
        compressor: *spec,
        name: spec.name(),
        analytic_gamma,
        bound,
        criterion,
        estimate,
        bias,
        roundtrip_ok: roundtrip,
        bits_per_payload: payload_bits(spec, d),
        status,
    })
}

/// Verifies every operator in `specs`, each on its own substream of `seed`.
pub fn verify_compressors(
    specs: &[CompressorSpec],
    d: usize,
    trials: usize,
    seed: u64,
) -> Result<VerifyReport> {
    let rows = specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut rng = substream(seed, Domain::Verify, i as u32);
            verify_compressor(spec, d, trials, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let passed = rows.iter().all(|r| r.status != Status::Fail);
    Ok(VerifyReport {
        d,
        trials,
        seed,
        rows,
        passed,
    })
}

impl VerifyReport {
    /// Fixed-width table for terminal output.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<26} {:>10} {:>10} {:>10} {:>10} {:>8} {:>6} {:>9} {}\n",
            "compressor", "gamma", "bound", "mean", "max", "bias_z", "wire", "bits", "status"
        );
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.5}"));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<26} {:>10} {:>10} {:>10.5} {:>10.5} {:>8} {:>6} {:>9} {}\n",
                r.name,
                opt(r.analytic_gamma),
                opt(r.bound),
                r.estimate.mean_ratio,
                r.estimate.max_ratio,
                r.bias
                    .map_or("-".to_string(), |b| format!("{:.2}", b.max_z)),
                if r.roundtrip_ok { "ok" } else { "FAIL" },
                r.bits_per_payload,
                match r.status {
                    Status::Pass => "pass",
                    Status::Fail => "FAIL",
                    Status::Informational => "info (no analytic gamma)",
                }
            ));
        }
        for r in &self.rows {
            if let Some(b) = &r.bias {
                out.push_str(&format!(
                    "{} unbiasedness: max |z| {:.2} (joint 3-SE limit {:.2}), {} coordinates beyond 3 SE (expected {:.2}), sum z^2 {:.1} in [{:.1}, {:.1}]\n",
                    r.name, b.max_z, b.z_limit, b.beyond_3se, b.expected_beyond_3se, b.chi2, b.chi2_band.0, b.chi2_band.1
                ));
            }
        }
        out
    }
}
