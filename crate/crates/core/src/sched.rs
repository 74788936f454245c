//! Timing-driven flexible participation and asynchronous delay.
//!
//! Clients train for a random duration after receiving the global model.
//! The server closes round `t` at simulated time `(t+1)·W`; every client
//! whose training finished by then joins `S_t`, uploads, and restarts from
//! the fresh model. A client whose delay reaches `tau_cap` is force-joined.
//!
//! Delay convention: `τ_t^i = t − p`, where `p` is the last round with
//! `i ∈ S_p` (`p = −1` initially, so `τ_0^i = 1`). A client with delay `τ`
//! at round `t` is training from the global model of round `t − τ + 1`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Minimum training duration in seconds.
pub const TIME_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingModel {
    /// Per-client mean training time (seconds).
    pub mean: Vec<f64>,
    /// Per-client standard deviation (seconds).
    pub std: Vec<f64>,
    /// Server waiting window `W` (seconds).
    pub window: f64,
    /// Delay at which an idle client is force-joined.
    pub tau_cap: u32,
}

impl TimingModel {
    /// Builds a model; `tau_cap` defaults to `max(1, ⌈4 · mean(μ) / W⌉)`.
    pub fn new(mean: Vec<f64>, std: Vec<f64>, window: f64, tau_cap: Option<u32>) -> Result<Self> {
        if !(window > 0.0 && window.is_finite()) {
            return Err(Error::invalid("timing", "waiting window must be positive"));
        }
        if mean.is_empty() || mean.len() != std.len() {
            return Err(Error::invalid(
                "timing",
                "need one mean and one std per client",
            ));
        }
        if mean.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(Error::invalid(
                "timing",
                "mean training times must be positive",
            ));
        }
        if std.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::invalid("timing", "std devs must be nonnegative"));
        }
        let tau_cap = match tau_cap {
            Some(0) => return Err(Error::invalid("timing", "tau_cap must be at least 1")),
            Some(c) => c,
            None => {
                let avg = mean.iter().sum::<f64>() / mean.len() as f64;
                ((4.0 * avg / window).ceil() as u32).max(1)
            }
        };
        Ok(TimingModel {
            mean,
            std,
            window,
            tau_cap,
        })
    }

    pub fn n_clients(&self) -> usize {
        self.mean.len()
    }

    /// Normal draw clamped at [`TIME_FLOOR`].
    fn draw(&self, client: usize, rng: &mut SimRng) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        (self.mean[client] + self.std[client] * z).max(TIME_FLOOR)
    }
}

/// Realised participation sets and delays over `T` rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipationTrace {
    pub n: usize,
    /// `S_t`, ascending client ids.
    pub participants: Vec<Vec<usize>>,
    /// `τ_t^i`, indexed `[t][i]`.
    pub delays: Vec<Vec<u32>>,
    /// `I_T^(i)`: the rounds `t + 1` with `i ∈ S_t`, ascending.
    pub participation_rounds: Vec<Vec<usize>>,
}

impl ParticipationTrace {
    /// Builds the trace implied by a sequence of participant sets.
    pub fn from_participants(n: usize, participants: Vec<Vec<usize>>) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("trace", "n must be at least 1"));
        }
        let mut last: Vec<i64> = vec![-1; n];
        let mut delays = Vec::with_capacity(participants.len());
        let mut rounds = vec![Vec::new(); n];
        let mut sets = Vec::with_capacity(participants.len());
        for (t, set) in participants.into_iter().enumerate() {
            let mut set = set;
            set.sort_unstable();
            set.dedup();
            if set.last().is_some_and(|&i| i >= n) {
                return Err(Error::invalid(
                    "trace",
                    format!("client id out of range in round {t}"),
                ));
            }
            delays.push(last.iter().map(|&p| (t as i64 - p) as u32).collect());
            for &i in &set {
                last[i] = t as i64;
                rounds[i].push(t + 1);
            }
            sets.push(set);
        }
        Ok(ParticipationTrace {
            n,
            participants: sets,
            delays,
            participation_rounds: rounds,
        })
    }

    /// Every client participates every round.
    pub fn synchronous(n: usize, rounds: usize) -> Result<Self> {
        Self::from_participants(n, vec![(0..n).collect(); rounds])
    }

    pub fn rounds(&self) -> usize {
        self.participants.len()
    }

    pub fn participates(&self, t: usize, client: usize) -> bool {
        self.participants[t].binary_search(&client).is_ok()
    }

    pub fn mean_participants(&self) -> f64 {
        if self.rounds() == 0 {
            return 0.0;
        }
        self.participants.iter().map(Vec::len).sum::<usize>() as f64 / self.rounds() as f64
    }

    /// Checks the structural invariants: `i ∈ S_t ⇔ t+1 ∈ I^(i)`, strictly
    /// increasing participation rounds, and the delay recurrence.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("trace", m));
        if self.delays.len() != self.rounds() || self.participation_rounds.len() != self.n {
            return bad("inconsistent lengths".into());
        }
        for (i, rounds) in self.participation_rounds.iter().enumerate() {
            if rounds.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("client {i}: participation rounds not increasing"));
            }
            for t in 0..self.rounds() {
                if self.participates(t, i) != rounds.binary_search(&(t + 1)).is_ok() {
                    return bad(format!("client {i}, round {t}: S_t and I_T disagree"));
                }
            }
        }
        for t in 0..self.rounds() {
            if self.delays[t].len() != self.n {
                return bad(format!("round {t}: delay row has wrong length"));
            }
            for i in 0..self.n {
                let expected = if t == 0 || self.participates(t - 1, i) {
                    1
                } else {
                    self.delays[t - 1][i] + 1
                };
                if self.delays[t][i] != expected {
                    return bad(format!("round {t}, client {i}: delay recurrence broken"));
                }
            }
        }
        Ok(())
    }

    /// Running `(τ_max, τ_avg0)` over rounds `0..=t`, for each `t`.
    pub fn prefix_stats(&self) -> Vec<(u32, f64)> {
        let mut max = 0;
        let mut sum = 0.0;
        self.delays
            .iter()
            .enumerate()
            .map(|(t, row)| {
                max = max.max(row.iter().copied().max().unwrap_or(0));
                sum += row.iter().map(|&v| v as f64).sum::<f64>() / self.n as f64;
                (max, sum / (t + 1) as f64)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Finish {
    time: f64,
    client: usize,
    generation: u64,
}

impl PartialEq for Finish {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Finish {}

impl PartialOrd for Finish {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Finish {
    // reversed: BinaryHeap pops the earliest time, then the lowest client id
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.client.cmp(&self.client))
            .then(other.generation.cmp(&self.generation))
    }
}

/// Event-driven simulation of `rounds` server windows.
pub fn simulate_participation(
    n: usize,
    rounds: usize,
    timing: &TimingModel,
    rng: &mut SimRng,
) -> Result<ParticipationTrace> {
    if n == 0 || rounds == 0 {
        return Err(Error::invalid(
            "trace",
            "need at least one client and one round",
        ));
    }
    if timing.n_clients() != n {
        return Err(Error::invalid(
            "timing",
            format!(
                "timing model has {} clients, expected {n}",
                timing.n_clients()
            ),
        ));
    }
    if timing.window.is_nan() || timing.window <= 0.0 {
        return Err(Error::invalid("timing", "waiting window must be positive"));
    }

    let mut queue = BinaryHeap::with_capacity(n);
    let mut generation = vec![0u64; n];
    for i in 0..n {
        queue.push(Finish {
            time: timing.draw(i, rng),
            client: i,
            generation: 0,
        });
    }

    let mut last: Vec<i64> = vec![-1; n];
    let mut sets = Vec::with_capacity(rounds);
    for t in 0..rounds {
        let close = (t + 1) as f64 * timing.window;
        let mut joined = vec![false; n];
        while let Some(ev) = queue.peek() {
            if ev.time > close {
                break;
            }
            let ev = queue.pop().unwrap();
            if ev.generation == generation[ev.client] {
                joined[ev.client] = true;
            }
        }
        for i in 0..n {
            if !joined[i] && (t as i64 - last[i]) >= timing.tau_cap as i64 {
                joined[i] = true;
            }
        }
        let set: Vec<usize> = (0..n).filter(|&i| joined[i]).collect();
        for &i in &set {
            last[i] = t as i64;
            generation[i] += 1;
            queue.push(Finish {
                time: close + timing.draw(i, rng),
                client: i,
                generation: generation[i],
            });
        }
        sets.push(set);
    }
    ParticipationTrace::from_participants(n, sets)
}

/// The delay statistics of a trace.
///
/// The nested forms look up round `b = t − τ_t^i + 1`, the round whose
/// global model client `i` is training from at round `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayStats {
    pub tau_max: u32,
    pub tau_avg0: f64,
    pub tau_avg_m0: f64,
    pub tau_avg1: f64,
    pub tau_avg_m1: f64,
}

impl DelayStats {
    pub fn compute(trace: &ParticipationTrace) -> Self {
        let t_len = trace.rounds();
        if t_len == 0 {
            return DelayStats {
                tau_max: 0,
                tau_avg0: 0.0,
                tau_avg_m0: 0.0,
                tau_avg1: 0.0,
                tau_avg_m1: 0.0,
            };
        }
        let n = trace.n as f64;
        let row_avg: Vec<f64> = trace
            .delays
            .iter()
            .map(|r| r.iter().map(|&v| v as f64).sum::<f64>() / n)
            .collect();
        let row_max: Vec<u32> = trace
            .delays
            .iter()
            .map(|r| r.iter().copied().max().unwrap_or(0))
            .collect();
        let (mut avg1, mut m1) = (0.0, 0.0);
        for (t, row) in trace.delays.iter().enumerate() {
            let (mut a, mut m) = (0.0, 0.0);
            for &tau in row {
                let b = (t as i64 - tau as i64 + 1).max(0) as usize;
                a += row_avg[b];
                m += row_max[b] as f64;
            }
            avg1 += a / n;
            m1 += m / n;
        }
        let tf = t_len as f64;
        DelayStats {
            tau_max: row_max.iter().copied().max().unwrap_or(0),
            tau_avg0: row_avg.iter().sum::<f64>() / tf,
            tau_avg_m0: row_max.iter().map(|&v| v as f64).sum::<f64>() / tf,
            tau_avg1: avg1 / tf,
            tau_avg_m1: m1 / tf,
        }
    }

    /// `τ_avg1 ≤ τ_avg0 ≤ τ_avg_m1 ≤ τ_avg_m0 ≤ τ_max`, with a relative
    /// slack of 1e-12 for summation rounding.
    pub fn ordering_holds(&self) -> bool {
        let chain = [
            self.tau_avg1,
            self.tau_avg0,
            self.tau_avg_m1,
            self.tau_avg_m0,
            self.tau_max as f64,
        ];
        chain
            .windows(2)
            .all(|w| w[0] <= w[1] + 1e-12 * w[1].abs().max(1.0))
    }
}

/// Computes the statistics and rejects traces that break the ordering.
pub fn delay_stats(trace: &ParticipationTrace) -> Result<DelayStats> {
    let stats = DelayStats::compute(trace);
    if stats.ordering_holds() {
        Ok(stats)
    } else {
        Err(Error::OrderingViolation(stats))
    }
}

/// `1 − γ ≤ 1 / (2(τ_max + 1))`
pub fn check_stability_condition(gamma: f64, tau_max: u32) -> bool {
    1.0 - gamma <= 1.0 / (2.0 * (tau_max as f64 + 1.0))
}
