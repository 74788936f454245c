//! The training loop shared by AsynFL, AsynFLC and AsynFLC-EF.
//!
//! Each round every client runs `K` local SGD steps. Participants of round
//! `t` then upload `Δ = x_local − x_base` (compressed, and with error
//! feedback when enabled), where `x_base` is the global model they last
//! downloaded. The server applies
//! `x_{t+1} = x_t + (η_g / n) Σ_{i ∈ S_t} decode(payload_i)` and the
//! participants restart from `x_{t+1}`.

use serde::{Deserialize, Serialize};

use crate::compress::{compress, gamma, CompressedPayload, CompressorSpec};
use crate::config::{EffectiveRates, Framework, RunConfig};
use crate::ef::{compensate_and_compress, residual_norms, ErrorAccumulator};
use crate::error::{check_dim, Error, Result};
use crate::metrics::{MetricsRow, MetricsSeries};
use crate::model::{make_synthetic_dataset, Objective};
use crate::params::ParamVector;
use crate::rng::{substream, Domain, SimRng};
use crate::sched::{
    check_stability_condition, simulate_participation, DelayStats, ParticipationTrace,
};

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    /// Current local iterate.
    pub local: ParamVector,
    /// The global model this client last downloaded.
    pub base: ParamVector,
    /// Round index of `base`.
    pub base_round: usize,
    pub ef: ErrorAccumulator,
}

impl ClientState {
    pub fn new(id: usize, x0: &ParamVector) -> Self {
        ClientState {
            id,
            local: x0.clone(),
            base: x0.clone(),
            base_round: 0,
            ef: ErrorAccumulator::new(x0.len()),
        }
    }

    /// Installs the freshly broadcast global model.
    pub fn download(&mut self, x: &ParamVector, round: usize) {
        self.local.clone_from(x);
        self.base.clone_from(x);
        self.base_round = round;
    }
}

fn train_block(
    client: &mut ClientState,
    obj: &Objective,
    steps: usize,
    eta: f64,
    batch_size: usize,
    rng: &mut SimRng,
) -> Result<()> {
    for _ in 0..steps {
        let g = obj.stochastic_gradient(client.id, &client.local, batch_size, rng)?;
        client.local.axpy(-eta, &g)?;
    }
    Ok(())
}

/// Runs `steps` local SGD steps on `client.local` and returns
/// `client.local − client.base`.
pub fn local_round(
    client: &mut ClientState,
    obj: &Objective,
    steps: usize,
    eta: f64,
    batch_size: usize,
    rng: &mut SimRng,
) -> Result<ParamVector> {
    train_block(client, obj, steps, eta, batch_size, rng)?;
    client.local.sub(&client.base)
}

/// `x + (η_g / n) Σ decode(p)`, summed in the given order.
pub fn global_update(
    x: &ParamVector,
    payloads: &[CompressedPayload],
    eta_g: f64,
    n: usize,
) -> Result<ParamVector> {
    if n == 0 {
        return Err(Error::invalid("n", "must be at least 1"));
    }
    let mut sum = vec![0.0; x.len()];
    for p in payloads {
        check_dim(x.len(), p.dim())?;
        p.add_into(1.0, &mut sum);
    }
    let mut next = x.clone();
    next.axpy(eta_g / n as f64, &ParamVector::from_vec(sum))?;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    /// First round whose global model is unusable.
    pub round: usize,
    pub reason: String,
}

/// Comparison of `η η_g K L̂` with the step-size scale of the convergence
/// guarantee for the chosen framework.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrGuard {
    pub l_hat: f64,
    pub step_scale: f64,
    pub limit: f64,
    pub within: bool,
}

/// Upper bound on `η η_g K L` under which the framework's guarantee applies.
pub fn stability_scale(framework: Framework, gamma: Option<f64>, tau_max: u32) -> Option<f64> {
    let tau = tau_max.max(1) as f64;
    match framework {
        Framework::Asynfl => Some(1.0 / (36.0 * 2f64.sqrt() * tau.powf(1.5))),
        Framework::Asynflc => {
            gamma.map(|g| 1.0 / (4.0 * (2.0 - g).sqrt() * (tau + 1.0).powf(1.5) * tau))
        }
        Framework::AsynflcEf => {
            gamma.map(|g| g / (72.0 * (3.0 * (g - 1.0) * (g - 1.0) + 1.0).sqrt() * tau.powf(1.5)))
        }
    }
}

/// Everything a run needs besides the config.
#[derive(Debug, Clone)]
pub struct Setup {
    pub objective: Objective,
    pub trace: ParticipationTrace,
}

impl Setup {
    /// Builds the dataset, objective and participation trace from `config`.
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let data = make_synthetic_dataset(&config.dataset_spec())?;
        let objective = Objective::from_dataset(&config.objective, &data)?;
        let timing = config.timing.model(config.n)?;
        let mut rng = substream(config.seed, Domain::Timing, 0);
        let trace = simulate_participation(config.n, config.rounds, &timing, &mut rng)?;
        Ok(Setup { objective, trace })
    }
}

/// One upload as seen by the server, passed to [`Observer::on_upload`].
#[derive(Debug)]
pub struct UploadEvent<'a> {
    pub round: usize,
    pub client: usize,
    pub base_round: usize,
    /// The global model the client trained from.
    pub base: &'a ParamVector,
    /// Raw local update `x_local − x_base`.
    pub delta: &'a ParamVector,
    /// Error-feedback residual before and after this upload, when enabled.
    pub residual_before: Option<&'a ParamVector>,
    pub residual_after: Option<&'a ParamVector>,
    pub payload: &'a CompressedPayload,
}

/// Hooks into a run; all methods default to no-ops.
pub trait Observer {
    fn on_upload(&mut self, _event: &UploadEvent<'_>) {}
    /// Called with `x_t` at the start of every round, and with `x_T` at the end.
    fn on_round(&mut self, _t: usize, _x: &ParamVector) {}
}

pub struct NoObserver;

impl Observer for NoObserver {}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub series: MetricsSeries,
    pub final_model: ParamVector,
    /// Rounds whose update was applied.
    pub rounds_completed: usize,
    pub final_grad_norm_sq: Option<f64>,
    pub divergence: Option<Divergence>,
    pub delay_stats: DelayStats,
    pub compressor: CompressorSpec,
    pub gamma: Option<f64>,
    pub rates: EffectiveRates,
    pub lr_guard: Option<LrGuard>,
    pub total_bits: u64,
    pub mean_participants: f64,
}

impl RunOutcome {
    pub fn stability_holds(&self) -> Option<bool> {
        self.gamma
            .map(|g| check_stability_condition(g, self.delay_stats.tau_max))
    }
}

/// Builds the setup from `config` and runs it.
pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    let setup = Setup::from_config(config)?;
    run_with(config, &setup.objective, &setup.trace, &mut NoObserver)
}

fn check_model(x: &ParamVector, limit: f64) -> Option<String> {
    if !x.is_finite() {
        return Some("non-finite entry in global model".into());
    }
    let norm = x.norm();
    (norm > limit).then(|| format!("global model norm {norm:.3e} exceeds {limit:.1e}"))
}

/// Runs `config` on an explicit objective and participation trace.
pub fn run_with(
    config: &RunConfig,
    objective: &Objective,
    trace: &ParticipationTrace,
    observer: &mut dyn Observer,
) -> Result<RunOutcome> {
    config.validate()?;
    let n = config.n;
    if objective.n_clients() != n || trace.n != n {
        return Err(Error::invalid(
            "setup",
            format!(
                "config has {n} clients, objective {}, trace {}",
                objective.n_clients(),
                trace.n
            ),
        ));
    }
    if trace.rounds() < config.rounds {
        return Err(Error::invalid(
            "trace",
            format!("{} rounds, config needs {}", trace.rounds(), config.rounds),
        ));
    }

    let compressor = if config.framework.compresses() {
        config.compressor.resolve(objective.dim())?
    } else {
        CompressorSpec::Identity
    };
    let use_ef = config.framework.error_feedback();
    let gamma = gamma(&compressor, objective.dim())?;
    let delay_stats = DelayStats::compute(trace);
    let rates = config.lr_schedule.effective(
        config.eta,
        config.eta_g,
        config.local_steps,
        n,
        config.rounds,
        delay_stats.tau_max,
    );

    let x0 = objective.initial_point(&mut substream(config.seed, Domain::Init, 0));
    let lr_guard = {
        let mut probe = substream(config.seed, Domain::Probe, 0);
        let l_hat = objective.smoothness_estimate(&x0, &mut probe)?;
        stability_scale(config.framework, gamma, delay_stats.tau_max).map(|limit| {
            let step_scale = rates.eta * rates.eta_g * config.local_steps as f64 * l_hat;
            let within = step_scale <= limit;
            if !within {
                log::warn!(
                    "step scale η·η_g·K·L̂ = {step_scale:.3e} exceeds the guarantee's {limit:.3e} (L̂ = {l_hat:.3e})"
                );
            }
            LrGuard {
                l_hat,
                step_scale,
                limit,
                within,
            }
        })
    };

    let mut clients: Vec<ClientState> = (0..n).map(|i| ClientState::new(i, &x0)).collect();
    let mut batch_rngs: Vec<SimRng> = (0..n)
        .map(|i| substream(config.seed, Domain::Batch, i as u32))
        .collect();
    let mut compress_rngs: Vec<SimRng> = (0..n)
        .map(|i| substream(config.seed, Domain::Compress, i as u32))
        .collect();
    let prefix = trace.prefix_stats();
    let mut x = x0;
    let mut series = MetricsSeries::default();
    let mut cum_bits = 0u64;
    let mut divergence = None;
    let mut rounds_completed = 0;

    for (t, &(tau_max_sofar, tau_avg0_sofar)) in prefix.iter().enumerate().take(config.rounds) {
        if let Some(reason) = check_model(&x, config.divergence_norm) {
            divergence = Some(Divergence { round: t, reason });
            break;
        }
        observer.on_round(t, &x);
        let participants = &trace.participants[t];
        if t % config.metrics_every == 0 {
            let grad = objective.full_gradient(&x)?;
            series.push(MetricsRow {
                t,
                grad_norm_sq: grad.norm_sq(),
                loss: objective.loss(&x)?,
                gap: objective.gap(&x),
                participants: participants.len(),
                cum_bits,
                ef_residual: residual_norms(clients.iter().map(|c| &c.ef)),
                tau_max_sofar,
                tau_avg0_sofar,
            });
        }

        let mut payloads = Vec::with_capacity(participants.len());
        let mut next_p = participants.iter().peekable();
        for (client, batch_rng) in clients.iter_mut().zip(batch_rngs.iter_mut()) {
            let (steps, eta, b) = (config.local_steps, rates.eta, config.batch_size);
            if next_p.peek() != Some(&&client.id) {
                train_block(client, objective, steps, eta, b, batch_rng)?;
                continue;
            }
            next_p.next();
            let delta = local_round(client, objective, steps, eta, b, batch_rng)?;
            let compress_rng = &mut compress_rngs[client.id];

            let payload = if use_ef {
                let (payload, acc) =
                    compensate_and_compress(&delta, &client.ef, &compressor, t + 1, compress_rng)?;
                observer.on_upload(&UploadEvent {
                    round: t,
                    client: client.id,
                    base_round: client.base_round,
                    base: &client.base,
                    delta: &delta,
                    residual_before: Some(&client.ef.residual),
                    residual_after: Some(&acc.residual),
                    payload: &payload,
                });
                client.ef = acc;
                payload
            } else {
                let payload = compress(&compressor, &delta, compress_rng);
                observer.on_upload(&UploadEvent {
                    round: t,
                    client: client.id,
                    base_round: client.base_round,
                    base: &client.base,
                    delta: &delta,
                    residual_before: None,
                    residual_after: None,
                    payload: &payload,
                });
                payload
            };
            cum_bits += payload.bit_cost();
            payloads.push(payload);
        }

        x = global_update(&x, &payloads, rates.eta_g, n)?;
        for &i in participants {
            clients[i].download(&x, t + 1);
        }
        rounds_completed = t + 1;
    }

    let final_grad_norm_sq = if divergence.is_none() {
        if let Some(reason) = check_model(&x, config.divergence_norm) {
            divergence = Some(Divergence {
                round: config.rounds,
                reason,
            });
            None
        } else {
            observer.on_round(config.rounds, &x);
            Some(objective.full_gradient(&x)?.norm_sq())
        }
    } else {
        None
    };
    if let Some(d) = &divergence {
        log::warn!("run diverged at round {}: {}", d.round, d.reason);
    }

    Ok(RunOutcome {
        series,
        final_model: x,
        rounds_completed,
        final_grad_norm_sq,
        divergence,
        delay_stats,
        compressor,
        gamma,
        rates,
        lr_guard,
        total_bits: cum_bits,
        mean_participants: trace.participants[..config.rounds]
            .iter()
            .map(|s| s.len() as f64)
            .sum::<f64>()
            / config.rounds as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::Encoding;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec())
    }

    #[test]
    fn global_update_divides_by_n() {
        let x = pv(&[1.0, 1.0]);
        let p = CompressedPayload::new(2, Encoding::Dense(vec![2.0, 0.0]));
        assert_eq!(global_update(&x, &[p], 1.0, 2).unwrap(), pv(&[2.0, 1.0]));
        assert_eq!(global_update(&x, &[], 1.0, 2).unwrap(), x);
        let bad = CompressedPayload::new(3, Encoding::Dense(vec![0.0; 3]));
        assert!(global_update(&x, &[bad], 1.0, 2).is_err());
    }

    #[test]
    fn stability_scale_shrinks_with_delay() {
        let a = stability_scale(Framework::Asynfl, None, 1).unwrap();
        let b = stability_scale(Framework::Asynfl, None, 4).unwrap();
        assert!(b < a);
        assert!(stability_scale(Framework::Asynflc, None, 4).is_none());
        assert!(stability_scale(Framework::AsynflcEf, Some(0.1), 4).is_some());
    }
}
