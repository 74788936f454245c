//! Gradient compressors and their payloads.
//!
//! A compressor `C` is a γ-contraction when `E‖x − C(x)‖² ≤ (1 − γ)‖x‖²`.
//! Top-k and the scaled sign operator satisfy this deterministically; the
//! QSGD-based operators satisfy their bounds in expectation; the raw ±1
//! sign operator carries no such guarantee.
//!
//! Payload values are held at full precision in memory so that the
//! simulation is exact; [`CompressedPayload::bit_cost`] accounts for them
//! at the declared 32-bit width, which is also what [`CompressedPayload::to_wire`]
//! writes.

pub mod verify;
mod wire;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::rng::SimRng;

/// Declared width of a transmitted real value.
pub const VALUE_BITS: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CompressorSpec {
    Identity,
    Topk {
        k: usize,
    },
    /// `(‖x‖₁/d)·sign(x)`
    SignScaled,
    /// Raw `±1` per coordinate.
    SignRaw,
    Qsgd {
        s: u32,
    },
    /// `Q_s(Top_k(x))`, norm taken over the `k` survivors.
    TopkThenQsgd {
        k: usize,
        s: u32,
    },
}

impl CompressorSpec {
    pub fn validate(&self, d: usize) -> Result<()> {
        if d == 0 {
            return Err(Error::invalid("compressor", "dimension must be at least 1"));
        }
        match *self {
            CompressorSpec::Topk { k } | CompressorSpec::TopkThenQsgd { k, .. }
                if k == 0 || k > d =>
            {
                Err(Error::invalid(
                    "compressor",
                    format!("k = {k} outside 1..={d}"),
                ))
            }
            CompressorSpec::Qsgd { s } | CompressorSpec::TopkThenQsgd { s, .. } if s == 0 => {
                Err(Error::invalid("compressor", "s must be at least 1"))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match *self {
            CompressorSpec::Identity => "identity".into(),
            CompressorSpec::Topk { k } => format!("topk(k={k})"),
            CompressorSpec::SignScaled => "sign_scaled".into(),
            CompressorSpec::SignRaw => "sign_raw".into(),
            CompressorSpec::Qsgd { s } => format!("qsgd(s={s})"),
            CompressorSpec::TopkThenQsgd { k, s } => format!("topk_then_qsgd(k={k},s={s})"),
        }
    }

    pub fn is_randomized(&self) -> bool {
        matches!(
            self,
            CompressorSpec::Qsgd { .. } | CompressorSpec::TopkThenQsgd { .. }
        )
    }
}

/// `β_{k,s} = min(k/s², √k/s)`
pub fn beta(k: usize, s: u32) -> f64 {
    let (k, s) = (k as f64, s as f64);
    (k / (s * s)).min(k.sqrt() / s)
}

/// Analytic contraction constant. `None` means the operator has no
/// analytic γ (raw sign).
///
/// `sign_scaled` reports its worst case `1/d`; the per-input value is
/// [`sign_gamma`]. Plain `qsgd` reports the composed formula at `k = d`.
pub fn gamma(spec: &CompressorSpec, d: usize) -> Result<Option<f64>> {
    spec.validate(d)?;
    let df = d as f64;
    Ok(match *spec {
        CompressorSpec::Identity => Some(1.0),
        CompressorSpec::Topk { k } => Some(k as f64 / df),
        CompressorSpec::SignScaled => Some(1.0 / df),
        CompressorSpec::SignRaw => None,
        CompressorSpec::Qsgd { s } => Some(1.0 / (1.0 + beta(d, s))),
        CompressorSpec::TopkThenQsgd { k, s } => Some(k as f64 / (df * (1.0 + beta(k, s)))),
    })
}

/// `‖x‖₁² / (d‖x‖₂²)`, the contraction the scaled sign operator achieves on `x`.
pub fn sign_gamma(x: &ParamVector) -> f64 {
    let l2 = x.norm_sq();
    if l2 == 0.0 {
        return 1.0;
    }
    let l1 = x.l1_norm();
    l1 * l1 / (x.len() as f64 * l2)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoding {
    Dense(Vec<f64>),
    /// Index/value pairs, indices ascending.
    Sparse {
        indices: Vec<u32>,
        values: Vec<f64>,
    },
    /// Output `norm · (±1) · level / s` at each listed index.
    SparseQuantized {
        norm: f64,
        s: u32,
        indices: Vec<u32>,
        negative: Vec<bool>,
        levels: Vec<u32>,
    },
    /// Output `scale · (±1)` everywhere.
    SignVector {
        scale: f64,
        negative: Vec<bool>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedPayload {
    dim: usize,
    encoding: Encoding,
}

impl CompressedPayload {
    pub fn new(dim: usize, encoding: Encoding) -> Self {
        CompressedPayload { dim, encoding }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encoding(&self) -> &Encoding {
        &self.encoding
    }

    /// The compressor output `C(x)` as a dense vector.
    pub fn decode(&self) -> ParamVector {
        let mut out = vec![0.0; self.dim];
        self.add_into(1.0, &mut out);
        ParamVector::from_vec(out)
    }

    /// `acc += alpha · decode()` without materialising the dense vector.
    pub fn add_into(&self, alpha: f64, acc: &mut [f64]) {
        match &self.encoding {
            Encoding::Dense(values) => {
                for (a, v) in acc.iter_mut().zip(values) {
                    *a += alpha * v;
                }
            }
            Encoding::Sparse { indices, values } => {
                for (&i, v) in indices.iter().zip(values) {
                    acc[i as usize] += alpha * v;
                }
            }
            Encoding::SparseQuantized {
                norm,
                s,
                indices,
                negative,
                levels,
            } => {
                for ((&i, &neg), &l) in indices.iter().zip(negative).zip(levels) {
                    acc[i as usize] += alpha * quantized_value(*norm, *s, neg, l);
                }
            }
            Encoding::SignVector { scale, negative } => {
                for (a, &neg) in acc.iter_mut().zip(negative) {
                    *a += alpha * if neg { -scale } else { *scale };
                }
            }
        }
    }

    /// Exact size in bits under the declared encoding.
    pub fn bit_cost(&self) -> u64 {
        let d = self.dim as u64;
        let ib = index_bits(self.dim) as u64;
        match &self.encoding {
            Encoding::Dense(_) => VALUE_BITS * d,
            Encoding::Sparse { indices, .. } => indices.len() as u64 * (VALUE_BITS + ib),
            Encoding::SparseQuantized { s, indices, .. } => {
                VALUE_BITS + indices.len() as u64 * (ib + 1 + level_bits(*s) as u64)
            }
            Encoding::SignVector { .. } => VALUE_BITS + d,
        }
    }

    /// Packs the payload into its wire layout (see the `wire` module docs).
    pub fn to_wire(&self) -> Vec<u8> {
        wire::encode(self)
    }

    pub fn from_wire(bytes: &[u8], spec: &CompressorSpec, d: usize) -> Result<Self> {
        wire::decode(bytes, spec, d)
    }

    /// The payload as it survives transmission: real values rounded to f32.
    pub fn at_wire_precision(&self) -> Self {
        let r = |v: f64| v as f32 as f64;
        let encoding = match &self.encoding {
            Encoding::Dense(values) => Encoding::Dense(values.iter().map(|&v| r(v)).collect()),
            Encoding::Sparse { indices, values } => Encoding::Sparse {
                indices: indices.clone(),
                values: values.iter().map(|&v| r(v)).collect(),
            },
            Encoding::SparseQuantized {
                norm,
                s,
                indices,
                negative,
                levels,
            } => Encoding::SparseQuantized {
                norm: r(*norm),
                s: *s,
                indices: indices.clone(),
                negative: negative.clone(),
                levels: levels.clone(),
            },
            Encoding::SignVector { scale, negative } => Encoding::SignVector {
                scale: r(*scale),
                negative: negative.clone(),
            },
        };
        CompressedPayload::new(self.dim, encoding)
    }
}

fn quantized_value(norm: f64, s: u32, negative: bool, level: u32) -> f64 {
    let v = norm * (level as f64 / s as f64);
    if negative {
        -v
    } else {
        v
    }
}

/// `⌈log2 d⌉`
pub fn index_bits(d: usize) -> u32 {
    usize::BITS - d.saturating_sub(1).leading_zeros()
}

/// `⌈log2(s + 1)⌉`
pub fn level_bits(s: u32) -> u32 {
    u32::BITS - s.leading_zeros()
}

/// Bit cost of one payload produced by `spec` on a `d`-vector.
pub fn payload_bits(spec: &CompressorSpec, d: usize) -> u64 {
    let df = d as u64;
    let ib = index_bits(d) as u64;
    match *spec {
        CompressorSpec::Identity => VALUE_BITS * df,
        CompressorSpec::Topk { k } => k as u64 * (VALUE_BITS + ib),
        CompressorSpec::SignScaled | CompressorSpec::SignRaw => VALUE_BITS + df,
        CompressorSpec::Qsgd { s } => VALUE_BITS + df * (ib + 1 + level_bits(s) as u64),
        CompressorSpec::TopkThenQsgd { k, s } => {
            VALUE_BITS + k as u64 * (ib + 1 + level_bits(s) as u64)
        }
    }
}

/// Indices of the `k` largest-magnitude entries (ties: lowest index), ascending.
fn topk_indices(x: &[f64], k: usize) -> Vec<u32> {
    let mut order: Vec<u32> = (0..x.len() as u32).collect();
    let by_magnitude = |a: &u32, b: &u32| {
        x[*b as usize]
            .abs()
            .total_cmp(&x[*a as usize].abs())
            .then(a.cmp(b))
    };
    if k < order.len() {
        order.select_nth_unstable_by(k, by_magnitude);
        order.truncate(k);
    }
    order.sort_unstable();
    order
}

pub fn compress_topk(x: &ParamVector, k: usize) -> CompressedPayload {
    let k = k.clamp(1, x.len().max(1));
    let indices = topk_indices(x.as_slice(), k);
    let values = indices.iter().map(|&i| x[i as usize]).collect();
    CompressedPayload::new(x.len(), Encoding::Sparse { indices, values })
}

/// Sign with `sign(0) = +1`. Scaled output is `(‖x‖₁/d)·sign(x)`.
pub fn compress_sign(x: &ParamVector, scaled: bool) -> CompressedPayload {
    let scale = if scaled {
        x.l1_norm() / x.len() as f64
    } else {
        1.0
    };
    let negative = x.iter().map(|&v| v < 0.0).collect();
    CompressedPayload::new(x.len(), Encoding::SignVector { scale, negative })
}

/// Stochastic quantisation of the listed entries onto `s` levels of their
/// joint 2-norm. One uniform draw is consumed per entry.
fn quantize(x: &[f64], indices: Vec<u32>, s: u32, rng: &mut SimRng) -> Encoding {
    let norm = indices
        .iter()
        .map(|&i| x[i as usize] * x[i as usize])
        .sum::<f64>()
        .sqrt();
    let mut negative = Vec::with_capacity(indices.len());
    let mut levels = Vec::with_capacity(indices.len());
    for &i in &indices {
        let v = x[i as usize];
        let u: f64 = rng.random();
        let level = if norm > 0.0 {
            let scaled = s as f64 * (v.abs() / norm);
            let floor = scaled.floor();
            let up = u < scaled - floor;
            (floor as u32 + up as u32).min(s)
        } else {
            0
        };
        negative.push(v < 0.0);
        levels.push(level);
    }
    Encoding::SparseQuantized {
        norm,
        s,
        indices,
        negative,
        levels,
    }
}

pub fn compress_qsgd(x: &ParamVector, s: u32, rng: &mut SimRng) -> CompressedPayload {
    let indices = (0..x.len() as u32).collect();
    CompressedPayload::new(x.len(), quantize(x.as_slice(), indices, s, rng))
}

pub fn compress_composed(x: &ParamVector, k: usize, s: u32, rng: &mut SimRng) -> CompressedPayload {
    let k = k.clamp(1, x.len().max(1));
    let indices = topk_indices(x.as_slice(), k);
    CompressedPayload::new(x.len(), quantize(x.as_slice(), indices, s, rng))
}

/// Applies `spec` to `x`. `rng` is only consumed by the randomized kinds.
pub fn compress(spec: &CompressorSpec, x: &ParamVector, rng: &mut SimRng) -> CompressedPayload {
    match *spec {
        CompressorSpec::Identity => {
            CompressedPayload::new(x.len(), Encoding::Dense(x.as_slice().to_vec()))
        }
        CompressorSpec::Topk { k } => compress_topk(x, k),
        CompressorSpec::SignScaled => compress_sign(x, true),
        CompressorSpec::SignRaw => compress_sign(x, false),
        CompressorSpec::Qsgd { s } => compress_qsgd(x, s, rng),
        CompressorSpec::TopkThenQsgd { k, s } => compress_composed(x, k, s, rng),
    }
}

/// Monte-Carlo estimate of `E‖x − C(x)‖² / ‖x‖²` over Gaussian inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionEstimate {
    /// Largest per-input ratio (inner mean over compressor randomness).
    pub max_ratio: f64,
    /// Ratio averaged over inputs and compressor randomness.
    pub mean_ratio: f64,
    /// Standard error of `mean_ratio` across inputs.
    pub std_err: f64,
    pub trials: usize,
}

/// Samples `trials` inputs `x ~ N(0, I_d)`. Randomized compressors are
/// applied `inner` times per input; deterministic ones once.
pub fn contraction_estimate(
    spec: &CompressorSpec,
    d: usize,
    trials: usize,
    inner: usize,
    rng: &mut SimRng,
) -> Result<ContractionEstimate> {
    spec.validate(d)?;
    if trials == 0 {
        return Err(Error::invalid("trials", "must be at least 1"));
    }
    let reps = if spec.is_randomized() {
        inner.max(1)
    } else {
        1
    };
    let mut ratios = Vec::with_capacity(trials);
    for _ in 0..trials {
        let x = ParamVector::from_vec((0..d).map(|_| rng.sample(StandardNormal)).collect());
        let norm_sq = x.norm_sq();
        let mut acc = 0.0;
        for _ in 0..reps {
            let c = compress(spec, &x, rng).decode();
            acc += x.sub(&c)?.norm_sq();
        }
        ratios.push(acc / reps as f64 / norm_sq);
    }
    let (mean, std_err) = mean_and_se(&ratios);
    Ok(ContractionEstimate {
        max_ratio: ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        mean_ratio: mean,
        std_err,
        trials,
    })
}

pub(crate) fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
