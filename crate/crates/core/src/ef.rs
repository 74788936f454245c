//! Client-side error feedback.
//!
//! Each client keeps the residual `e` of its last compressed upload. On the
//! next participation it transmits `C(Δ + e)` and keeps
//! `e' = (Δ + e) − C(Δ + e)`. Between participations the residual is frozen.

use crate::compress::{compress, CompressedPayload, CompressorSpec};
use crate::error::{check_dim, Result};
use crate::params::ParamVector;
use crate::rng::SimRng;

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorAccumulator {
    pub residual: ParamVector,
    /// Global round whose model the client received after its last upload
    /// (0 before the first participation).
    pub last_update_round: usize,
}

impl ErrorAccumulator {
    pub fn new(d: usize) -> Self {
        ErrorAccumulator {
            residual: ParamVector::zeros(d),
            last_update_round: 0,
        }
    }
}

/// Compresses `delta + acc.residual` and returns the payload with the
/// updated accumulator. `decode(payload) + new.residual == delta + old.residual`
/// up to one rounding per coordinate.
pub fn compensate_and_compress(
    delta: &ParamVector,
    acc: &ErrorAccumulator,
    compressor: &CompressorSpec,
    round: usize,
    rng: &mut SimRng,
) -> Result<(CompressedPayload, ErrorAccumulator)> {
    check_dim(acc.residual.len(), delta.len())?;
    let corrected = delta.add(&acc.residual)?;
    let payload = compress(compressor, &corrected, rng);
    let residual = corrected.sub(&payload.decode())?;
    Ok((
        payload,
        ErrorAccumulator {
            residual,
            last_update_round: round,
        },
    ))
}

/// `(1/n) Σ_i ‖e_i‖²`
pub fn residual_norms<'a>(accs: impl IntoIterator<Item = &'a ErrorAccumulator>) -> f64 {
    let (sum, n) = accs
        .into_iter()
        .fold((0.0, 0usize), |(s, n), a| (s + a.residual.norm_sq(), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
