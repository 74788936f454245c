//! Training-loop behaviour on small, fully controlled setups.

use asyncfl::compress::CompressorSpec;
use asyncfl::config::{CompressorConfig, Framework, RunConfig};
use asyncfl::engine::{local_round, run, run_with, ClientState, Observer, Setup, UploadEvent};
use asyncfl::metrics::stationarity_average;
use asyncfl::model::Objective;
use asyncfl::rng::{substream, Domain};
use asyncfl::sched::ParticipationTrace;
use asyncfl::ParamVector;

/// `f_i(x) = ½‖x‖²` for every client, so every gradient is `x` itself.
fn unit_quadratic(n: usize, d: usize) -> Objective {
    Objective::quadratic(vec![1.0; d], vec![vec![ParamVector::zeros(d)]; n]).unwrap()
}

fn small_config(n: usize, rounds: usize) -> RunConfig {
    let mut cfg = RunConfig {
        n,
        rounds,
        ..RunConfig::default()
    };
    cfg.data.feature_dim = 20;
    cfg.data.examples_per_client = 16;
    cfg.batch_size = 4;
    cfg
}

#[test]
fn local_round_follows_the_linear_recursion() {
    let obj = unit_quadratic(1, 3);
    let x0 = ParamVector::from_vec(vec![1.0, -2.0, 0.5]);
    let mut rng = substream(0, Domain::Batch, 0);
    for (eta, k) in [(0.01, 5), (0.1, 1), (0.0, 7)] {
        let mut client = ClientState::new(0, &x0);
        let delta = local_round(&mut client, &obj, k, eta, 1, &mut rng).unwrap();
        let factor = (1.0 - eta).powi(k as i32) - 1.0;
        for i in 0..3 {
            assert!((delta[i] - factor * x0[i]).abs() <= 1e-12);
        }
        // Δ is also the accumulated sum of −η ∇F along the local path
        let mut path = x0.clone();
        let mut sum = ParamVector::zeros(3);
        for _ in 0..k {
            let g = path.clone();
            sum.axpy(-eta, &g).unwrap();
            path.axpy(-eta, &g).unwrap();
        }
        assert!(delta.max_abs_diff(&sum).unwrap() <= 1e-10);
    }
}

#[test]
fn framework_choice_fixes_the_compressor() {
    let mut cfg = small_config(4, 3);
    cfg.compressor = CompressorConfig::SignRaw;
    assert_eq!(run(&cfg).unwrap().compressor, CompressorSpec::Identity);
    cfg.framework = Framework::Asynflc;
    assert_eq!(run(&cfg).unwrap().compressor, CompressorSpec::SignRaw);
}

/// Records the global model history and checks every upload against it.
struct Auditor {
    history: Vec<ParamVector>,
    trace: ParticipationTrace,
    uploads: usize,
    raw: Vec<ParamVector>,
    sent: Vec<ParamVector>,
    residual_change: Vec<ParamVector>,
}

impl Auditor {
    fn new(trace: ParticipationTrace, n: usize, d: usize) -> Self {
        Auditor {
            history: Vec::new(),
            trace,
            uploads: 0,
            raw: vec![ParamVector::zeros(d); n],
            sent: vec![ParamVector::zeros(d); n],
            residual_change: vec![ParamVector::zeros(d); n],
        }
    }
}

impl Observer for Auditor {
    fn on_round(&mut self, t: usize, x: &ParamVector) {
        assert_eq!(self.history.len(), t);
        self.history.push(x.clone());
    }

    fn on_upload(&mut self, e: &UploadEvent<'_>) {
        self.uploads += 1;
        let tau = self.trace.delays[e.round][e.client] as usize;
        assert_eq!(
            e.base_round,
            e.round + 1 - tau,
            "client {} round {}",
            e.client,
            e.round
        );
        assert_eq!(e.base, &self.history[e.base_round]);
        self.raw[e.client].axpy(1.0, e.delta).unwrap();
        self.sent[e.client].axpy(1.0, &e.payload.decode()).unwrap();
        let change = e
            .residual_after
            .unwrap()
            .sub(e.residual_before.unwrap())
            .unwrap();
        self.residual_change[e.client].axpy(1.0, &change).unwrap();
    }
}

#[test]
fn uploads_use_the_downloaded_version_and_conserve_contribution() {
    let mut cfg = small_config(6, 120);
    cfg.framework = Framework::AsynflcEf;
    cfg.compressor = CompressorConfig::Topk {
        k: Some(3),
        k_frac: None,
    };
    cfg.timing.mean_max = 2500.0;
    let setup = Setup::from_config(&cfg).unwrap();
    assert!(
        setup.trace.delays.iter().flatten().any(|&t| t > 1),
        "trace has no delays"
    );
    let mut auditor = Auditor::new(setup.trace.clone(), cfg.n, setup.objective.dim());
    let out = run_with(&cfg, &setup.objective, &setup.trace, &mut auditor).unwrap();
    assert!(out.divergence.is_none());
    let expected: usize = setup.trace.participants.iter().map(Vec::len).sum();
    assert_eq!(auditor.uploads, expected);
    assert_eq!(auditor.history.len(), cfg.rounds + 1);
    for i in 0..cfg.n {
        let lhs = auditor.sent[i].add(&auditor.residual_change[i]).unwrap();
        let scale = auditor.raw[i].norm().max(1.0);
        assert!(lhs.max_abs_diff(&auditor.raw[i]).unwrap() <= 1e-10 * scale);
    }
}

#[test]
fn absent_clients_keep_training_from_their_base() {
    // f_i(x) = ½‖x − b‖² for both clients; client 1 is absent for rounds
    // 0..=2 and joins at round 3, so its update spans τ = 4 blocks of K steps
    let n = 2;
    let b = ParamVector::from_vec(vec![1.0, -2.0]);
    let obj = Objective::quadratic(vec![1.0; 2], vec![vec![b.clone()]; n]).unwrap();
    let trace =
        ParticipationTrace::from_participants(n, vec![vec![0], vec![0], vec![0], vec![0, 1]])
            .unwrap();
    let mut cfg = small_config(n, 4);
    cfg.local_steps = 3;
    cfg.eta = 0.05;
    struct Grab(Vec<(usize, usize, usize, ParamVector, ParamVector)>);
    impl Observer for Grab {
        fn on_upload(&mut self, e: &UploadEvent<'_>) {
            self.0.push((
                e.round,
                e.client,
                e.base_round,
                e.base.clone(),
                e.delta.clone(),
            ));
        }
    }
    let mut grab = Grab(Vec::new());
    run_with(&cfg, &obj, &trace, &mut grab).unwrap();
    let (round, client, base_round, base, delta) = grab.0.last().unwrap().clone();
    assert_eq!((round, client, base_round), (3, 1, 0));
    let factor = (1.0 - cfg.eta).powi(4 * 3) - 1.0;
    for k in 0..2 {
        let expected = factor * (base[k] - b[k]);
        assert!(expected.abs() > 0.1);
        assert!((delta[k] - expected).abs() <= 1e-12);
    }
}

#[test]
fn synchronous_quadratic_descends_monotonically() {
    let mut cfg = small_config(4, 150);
    cfg.data.noise_scale = 0.0;
    cfg.local_steps = 2;
    cfg.eta = 0.1;
    let setup = Setup::from_config(&cfg).unwrap();
    let trace = ParticipationTrace::synchronous(cfg.n, cfg.rounds).unwrap();
    let out = run_with(
        &cfg,
        &setup.objective,
        &trace,
        &mut asyncfl::engine::NoObserver,
    )
    .unwrap();
    let gaps: Vec<f64> = out.series.rows.iter().map(|r| r.gap.unwrap()).collect();
    assert!(gaps.windows(2).all(|w| w[1] <= w[0]), "gap not monotone");
    assert!(gaps.last().unwrap() < &(gaps[0] * 1e-3));
}

#[test]
fn stationarity_average_falls_when_rounds_double() {
    let cfg = RunConfig {
        rounds: 1000,
        ..RunConfig::default()
    };
    let short = run(&cfg).unwrap();
    let long = run(&RunConfig {
        rounds: 2000,
        ..cfg.clone()
    })
    .unwrap();
    let a = stationarity_average(&short.series, 0..1000).unwrap();
    let b = stationarity_average(&long.series, 0..2000).unwrap();
    assert!(b / a <= 0.75, "ratio {}", b / a);
}

#[test]
fn longer_training_times_do_not_help() {
    let mut fast = Vec::new();
    let mut slow = Vec::new();
    for seed in 0..3 {
        let mut cfg = small_config(16, 400);
        cfg.seed = seed;
        cfg.framework = Framework::AsynflcEf;
        let avg = |cfg: &RunConfig| {
            let out = run(cfg).unwrap();
            stationarity_average(&out.series, 0..cfg.rounds).unwrap()
        };
        fast.push(avg(&cfg));
        cfg.timing.mean_min *= 2.0;
        cfg.timing.mean_max *= 2.0;
        slow.push(avg(&cfg));
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[1]
    };
    let (f, s) = (median(&mut fast), median(&mut slow));
    assert!(s >= 0.95 * f, "slow {s} vs fast {f}");
}

#[test]
fn divergence_is_reported_not_raised() {
    let mut cfg = small_config(8, 50);
    cfg.framework = Framework::Asynflc;
    cfg.compressor = CompressorConfig::SignRaw;
    cfg.eta_g = 1e9;
    let out = run(&cfg).unwrap();
    let div = out.divergence.expect("expected divergence");
    assert!(div.round >= 1 && div.round <= cfg.rounds);
    assert_eq!(out.series.len(), div.round);
    assert!(out.final_grad_norm_sq.is_none());
}

#[test]
fn metrics_cadence_and_bit_accounting() {
    let mut cfg = small_config(5, 40);
    cfg.metrics_every = 7;
    cfg.framework = Framework::Asynflc;
    cfg.compressor = CompressorConfig::Topk {
        k: Some(2),
        k_frac: None,
    };
    let out = run(&cfg).unwrap();
    let ts: Vec<usize> = out.series.rows.iter().map(|r| r.t).collect();
    assert_eq!(ts, vec![0, 7, 14, 21, 28, 35]);
    assert!(out
        .series
        .rows
        .windows(2)
        .all(|w| w[0].cum_bits <= w[1].cum_bits));
    let setup = Setup::from_config(&cfg).unwrap();
    let uploads: usize = setup.trace.participants.iter().map(Vec::len).sum();
    assert_eq!(out.total_bits, uploads as u64 * 2 * (32 + 5));
}

#[test]
fn mismatched_trace_is_rejected() {
    let cfg = small_config(4, 10);
    let setup = Setup::from_config(&cfg).unwrap();
    let short = ParticipationTrace::synchronous(4, 5).unwrap();
    assert!(run_with(
        &cfg,
        &setup.objective,
        &short,
        &mut asyncfl::engine::NoObserver
    )
    .is_err());
    let wrong_n = ParticipationTrace::synchronous(3, 10).unwrap();
    assert!(run_with(
        &cfg,
        &setup.objective,
        &wrong_n,
        &mut asyncfl::engine::NoObserver
    )
    .is_err());
}
