//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs with its own harness so the verdict lines are always printed.
//! Every threshold below was pinned before this file was written and is
//! not tuned per run; the configurations are fixed and fully seeded.

use std::time::{Duration, Instant};

use asyncfl::compress::verify::{default_suite, verify_compressors, Status};
use asyncfl::compress::{gamma, payload_bits, CompressorSpec};
use asyncfl::config::{CompressorConfig, Framework, LrSchedule, RunConfig};
use asyncfl::engine::{run, run_with, NoObserver, Observer, RunOutcome, Setup, UploadEvent};
use asyncfl::metrics::{
    compression_ratio, final_window, per_round_ratio, stationarity_average, CommRatio,
    ThresholdMetric,
};
use asyncfl::model::{ObjectiveKind, Partition};
use asyncfl::rng::{substream, Domain};
use asyncfl::sched::{
    check_stability_condition, simulate_participation, DelayStats, ParticipationTrace, TimingModel,
};
use asyncfl::ParamVector;
use rand::Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn topk(frac: f64) -> CompressorConfig {
    CompressorConfig::Topk {
        k: None,
        k_frac: Some(frac),
    }
}

fn with(base: &RunConfig, f: impl FnOnce(&mut RunConfig)) -> RunConfig {
    let mut cfg = base.clone();
    f(&mut cfg);
    cfg.validate().expect("acceptance config is valid");
    cfg
}

fn final_avg(cfg: &RunConfig, out: &RunOutcome) -> f64 {
    if out.divergence.is_some() {
        return f64::INFINITY;
    }
    stationarity_average(&out.series, final_window(cfg.rounds, 0.25)).expect("non-empty window")
}

fn run_final(cfg: &RunConfig) -> (f64, RunOutcome) {
    let out = run(cfg).expect("run completes");
    (final_avg(cfg, &out), out)
}

fn median3(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn fmt_list(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.3}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// 1. Compressor contract at d = 100 with 10,000 trials.
fn compressor_contract() -> Verdict {
    let start = Instant::now();
    let report = verify_compressors(&default_suite(100), 100, 10_000, 0).unwrap();
    let elapsed = start.elapsed();
    let row = |spec: CompressorSpec| report.rows.iter().find(|r| r.compressor == spec).unwrap();
    let top3 = row(CompressorSpec::Topk { k: 3 });
    let composed = row(CompressorSpec::TopkThenQsgd { k: 3, s: 3 });
    let qsgd = row(CompressorSpec::Qsgd { s: 4 });
    let bias = qsgd.bias.unwrap();
    let raw_info = row(CompressorSpec::SignRaw).status == Status::Informational;
    let passed = report.passed && raw_info && elapsed <= Duration::from_secs(30);
    verdict(
        passed,
        format!(
            "top-3 max ratio {:.4} <= 0.97; composed mean {:.4} <= {:.4} + 3 SE ({:.1e}); qsgd max |z| {:.2} <= joint 3-SE limit {:.2} ({} of 100 coordinates beyond 3 SE, {:.2} expected by chance), sum z^2 {:.1} in [{:.1}, {:.1}]; {:.1}s",
            top3.estimate.max_ratio,
            composed.estimate.mean_ratio,
            composed.bound.unwrap(),
            composed.estimate.std_err,
            bias.max_z,
            bias.z_limit,
            bias.beyond_3se,
            bias.expected_beyond_3se,
            bias.chi2,
            bias.chi2_band.0,
            bias.chi2_band.1,
            elapsed.as_secs_f64()
        ),
    )
}

/// 2. `decode(payload) + e_after = Δ + e_before` at every participation.
fn ef_telescoping() -> Verdict {
    struct Check {
        uploads: usize,
        worst: f64,
    }
    impl Observer for Check {
        fn on_upload(&mut self, e: &UploadEvent<'_>) {
            let lhs = e.payload.decode().add(e.residual_after.unwrap()).unwrap();
            let rhs = e.delta.add(e.residual_before.unwrap()).unwrap();
            let rel = lhs.sub(&rhs).unwrap().norm() / rhs.norm().max(f64::MIN_POSITIVE);
            self.uploads += 1;
            self.worst = self.worst.max(rel);
        }
    }
    let cfg = with(&RunConfig::default(), |c| {
        c.framework = Framework::AsynflcEf;
        c.compressor = topk(0.1);
        c.rounds = 500;
    });
    let setup = Setup::from_config(&cfg).unwrap();
    let mut check = Check {
        uploads: 0,
        worst: 0.0,
    };
    let out = run_with(&cfg, &setup.objective, &setup.trace, &mut check).unwrap();
    verdict(
        out.divergence.is_none() && check.uploads > 0 && check.worst <= 1e-10,
        format!(
            "{} participations over 500 rounds, worst relative error {:.2e} <= 1e-10",
            check.uploads, check.worst
        ),
    )
}

/// Time-average of the mean residual norm² over the whole run.
fn mean_residual(out: &RunOutcome) -> f64 {
    out.series.rows.iter().map(|r| r.ef_residual).sum::<f64>() / out.series.len() as f64
}

/// 3. Averaged EF residual at T = 4000 vs T = 2000 under `η ∝ 1/√T`.
fn residual_decay() -> Verdict {
    let start = Instant::now();
    let base = with(&RunConfig::default(), |c| {
        c.framework = Framework::AsynflcEf;
        c.compressor = topk(0.1);
        c.lr_schedule = LrSchedule::SqrtT;
        c.eta = 2.2;
        c.eta_g = 1.0 / ((c.local_steps * c.n) as f64).sqrt();
    });
    let ratios: Vec<f64> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..3u64)
            .map(|seed| {
                let base = &base;
                s.spawn(move || {
                    let short = with(base, |c| {
                        c.seed = seed;
                        c.rounds = 2000;
                    });
                    let long = with(&short, |c| c.rounds = 4000);
                    mean_residual(&run(&long).unwrap()) / mean_residual(&run(&short).unwrap())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let median = median3(ratios.clone());
    let elapsed = start.elapsed();
    verdict(
        median <= 0.8 && elapsed <= Duration::from_secs(300),
        format!(
            "residual ratio T=4000/T=2000 per seed [{}], median {median:.3} <= 0.8; {:.1}s",
            fmt_list(&ratios),
            elapsed.as_secs_f64()
        ),
    )
}

/// 4. AsynFLC-EF (Top 10%) within 2x of AsynFL, quadratic and logistic.
fn ef_parity() -> Verdict {
    let quadratic = with(&RunConfig::default(), |c| {
        c.data.noise_scale = 3.0;
        c.eta = 0.003;
        c.compressor = topk(0.1);
    });
    let logistic = with(&RunConfig::default(), |c| {
        c.objective = ObjectiveKind::Logistic { l2: 1e-3 };
        c.data.feature_dim = 50;
        c.data.noise_scale = 3.0;
        c.eta = 0.05;
        c.compressor = topk(0.1);
    });
    let results: Vec<(f64, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = [&quadratic, &logistic]
            .into_iter()
            .flat_map(|cfg| {
                [Framework::Asynfl, Framework::AsynflcEf]
                    .map(|fw| s.spawn(move || run_final(&with(cfg, |c| c.framework = fw)).0))
            })
            .collect();
        let v: Vec<f64> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        vec![(v[0], v[1]), (v[2], v[3])]
    });
    let factor = |(a, b): (f64, f64)| a.max(b) / a.min(b);
    let (q, l) = (factor(results[0]), factor(results[1]));
    verdict(
        q <= 2.0 && l <= 2.0,
        format!(
            "final-window |grad|^2 quadratic AsynFL {:.3e} vs EF {:.3e} ({q:.2}x); logistic {:.3e} vs {:.3e} ({l:.2}x); both <= 2x",
            results[0].0, results[0].1, results[1].0, results[1].1
        ),
    )
}

/// 5. AsynFLC (Top 3%, no EF) plateau at least 5x the AsynFLC-EF plateau.
fn no_ef_plateau() -> Verdict {
    let base = with(&RunConfig::default(), |c| {
        c.eta = 0.02;
        c.compressor = topk(0.03);
    });
    let rows: Vec<(f64, f64, u32)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..3u64)
            .map(|seed| {
                let base = &base;
                s.spawn(move || {
                    let (plain, out) = run_final(&with(base, |c| {
                        c.seed = seed;
                        c.framework = Framework::Asynflc;
                    }));
                    let (ef, _) = run_final(&with(base, |c| {
                        c.seed = seed;
                        c.framework = Framework::AsynflcEf;
                    }));
                    (plain, ef, out.delay_stats.tau_max)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let ratios: Vec<f64> = rows.iter().map(|(p, e, _)| p / e).collect();
    let taus: Vec<u32> = rows.iter().map(|r| r.2).collect();
    let median = median3(ratios.clone());
    verdict(
        median >= 5.0 && taus.iter().all(|&t| t >= 4),
        format!(
            "no-EF / EF plateau per seed [{}], median {median:.2} >= 5; tau_max {taus:?} >= 4",
            fmt_list(&ratios)
        ),
    )
}

/// Top-k sizes at d = 200. 186 meets the condition for every `τ_max ≤ 6`
/// and 30 violates it at least tenfold for every `τ_max ≥ 5`. Both are
/// checked against the realized trace before running.
const K_SATISFIED: usize = 186;
const K_VIOLATED: usize = 30;

/// 6. Stability condition under IID data.
fn stability_condition() -> Verdict {
    let base = with(&RunConfig::default(), |c| {
        c.framework = Framework::Asynflc;
        c.data.partition = Partition::Identical;
        c.eta = 0.02;
    });
    let d = base.dim();
    assert_eq!(d, 200);
    type Outcome = Result<(u32, usize, usize, f64, f64), String>;
    let rows: Vec<Outcome> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..3u64)
            .map(|seed| {
                let base = &base;
                s.spawn(move || {
                    let cfg = with(base, |c| c.seed = seed);
                    let setup = Setup::from_config(&cfg).unwrap();
                    let tau = DelayStats::compute(&setup.trace).tau_max;
                    let bound = 1.0 / (2.0 * (tau as f64 + 1.0));
                    let (k_ok, k_bad) = (K_SATISFIED, K_VIOLATED);
                    let g_ok = gamma(&CompressorSpec::Topk { k: k_ok }, d)
                        .unwrap()
                        .unwrap();
                    let g_bad = gamma(&CompressorSpec::Topk { k: k_bad }, d)
                        .unwrap()
                        .unwrap();
                    if !check_stability_condition(g_ok, tau) || 1.0 - g_bad < 10.0 * bound {
                        return Err(format!(
                            "cannot build the compressor pair for tau_max {tau}"
                        ));
                    }
                    let at = |k: usize| {
                        let c = with(&cfg, |c| {
                            c.compressor = CompressorConfig::Topk {
                                k: Some(k),
                                k_frac: None,
                            }
                        });
                        let out =
                            run_with(&c, &setup.objective, &setup.trace, &mut NoObserver).unwrap();
                        final_avg(&c, &out)
                    };
                    Ok((tau, k_ok, k_bad, at(k_ok), at(k_bad)))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut passed = true;
    let mut parts = Vec::new();
    for r in rows {
        match r {
            Ok((tau, k_ok, k_bad, ok, bad)) => {
                passed &= ok <= 1e-3 && bad >= 10.0 * ok;
                parts.push(format!(
                    "tau_max {tau}: k={k_ok} -> {ok:.2e} <= 1e-3, k={k_bad} -> {bad:.2e} ({:.1}x)",
                    bad / ok
                ));
            }
            Err(e) => {
                passed = false;
                parts.push(e);
            }
        }
    }
    verdict(passed, parts.join("; "))
}

/// 7. Raw sign under non-IID data diverges or plateaus 10x above AsynFL.
fn sign_non_convergence() -> Verdict {
    let base = with(&RunConfig::default(), |c| c.eta = 0.02);
    let (fl, _) = run_final(&base);
    let (sign, out) = run_final(&with(&base, |c| {
        c.framework = Framework::Asynflc;
        c.compressor = CompressorConfig::SignRaw;
    }));
    let detail = match &out.divergence {
        Some(d) => format!("sign_raw diverged at round {}", d.round),
        None => format!(
            "no divergence; sign_raw plateau {sign:.3e} vs AsynFL {fl:.3e} ({:.0}x >= 10x)",
            sign / fl
        ),
    };
    verdict(out.divergence.is_some() || sign >= 10.0 * fl, detail)
}

/// 8. Degenerate configurations reduce to simpler algorithms.
fn degeneracy() -> Verdict {
    // (a) EF with the identity compressor is AsynFL
    let base = with(&RunConfig::default(), |c| c.rounds = 300);
    let fl = run(&base).unwrap();
    let ef = run(&with(&base, |c| {
        c.framework = Framework::AsynflcEf;
        c.compressor = CompressorConfig::Identity;
    }))
    .unwrap();
    let same_csv = fl.series.to_csv_bytes().unwrap() == ef.series.to_csv_bytes().unwrap();
    let same_bits = fl
        .final_model
        .iter()
        .zip(ef.final_model.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let zero_residual = ef.series.rows.iter().all(|r| r.ef_residual == 0.0);

    // (b) synchronous trace, K = 1, identity: mini-batch SGD with step η η_g
    let cfg = with(&RunConfig::default(), |c| {
        c.rounds = 200;
        c.local_steps = 1;
        c.eta_g = 0.8;
    });
    let setup = Setup::from_config(&cfg).unwrap();
    let trace = ParticipationTrace::synchronous(cfg.n, cfg.rounds).unwrap();
    struct History(Vec<ParamVector>);
    impl Observer for History {
        fn on_round(&mut self, _t: usize, x: &ParamVector) {
            self.0.push(x.clone());
        }
    }
    let mut history = History(Vec::new());
    run_with(&cfg, &setup.objective, &trace, &mut history).unwrap();

    let obj = &setup.objective;
    let mut rngs: Vec<_> = (0..cfg.n)
        .map(|i| substream(cfg.seed, Domain::Batch, i as u32))
        .collect();
    let mut x = obj.initial_point(&mut substream(cfg.seed, Domain::Init, 0));
    let mut worst: f64 = 0.0;
    for t in 0..=cfg.rounds {
        worst = worst.max(x.max_abs_diff(&history.0[t]).unwrap());
        if t == cfg.rounds {
            break;
        }
        let mut g = ParamVector::zeros(obj.dim());
        for (i, rng) in rngs.iter_mut().enumerate() {
            g.axpy(
                1.0 / cfg.n as f64,
                &obj.stochastic_gradient(i, &x, cfg.batch_size, rng).unwrap(),
            )
            .unwrap();
        }
        x.axpy(-cfg.eta * cfg.eta_g, &g).unwrap();
    }
    verdict(
        same_csv && same_bits && zero_residual && history.0.len() == cfg.rounds + 1 && worst <= 1e-10,
        format!(
            "(a) EF+identity vs AsynFL: CSV identical {same_csv}, model bit-identical {same_bits}, residual zero {zero_residual}; (b) max deviation from SGD oracle over 200 rounds {worst:.2e} <= 1e-10"
        ),
    )
}

/// 9. Delay-statistic ordering on random traces and the two-client example.
fn delay_statistics() -> Verdict {
    let mut rng = substream(2024, Domain::Timing, 99);
    let mut failures = 0;
    let mut sizes = (usize::MAX, 0usize, usize::MAX, 0usize);
    for i in 0..100u32 {
        let n = rng.random_range(4..=40usize);
        let rounds = rng.random_range(100..=500usize);
        let window: f64 = rng.random_range(100.0..1000.0);
        let lo: f64 = rng.random_range(0.2..2.0) * window;
        let hi: f64 = lo * rng.random_range(1.0..8.0);
        let std_frac = rng.random_range(0.0..0.5);
        let mean: Vec<f64> = (0..n)
            .map(|j| lo * (hi / lo).powf(j as f64 / (n - 1) as f64))
            .collect();
        let std = mean.iter().map(|m| m * std_frac).collect();
        let timing = TimingModel::new(mean, std, window, None).unwrap();
        let trace = simulate_participation(
            n,
            rounds,
            &timing,
            &mut substream(i as u64, Domain::Timing, 0),
        )
        .unwrap();
        if !DelayStats::compute(&trace).ordering_holds() {
            failures += 1;
        }
        sizes = (
            sizes.0.min(n),
            sizes.1.max(n),
            sizes.2.min(rounds),
            sizes.3.max(rounds),
        );
    }
    let w = 10.0;
    let timing = TimingModel::new(vec![0.99 * w, 1.99 * w], vec![0.0, 0.0], w, Some(10)).unwrap();
    let trace =
        simulate_participation(2, 40, &timing, &mut substream(0, Domain::Timing, 0)).unwrap();
    let two = DelayStats::compute(&trace);
    verdict(
        failures == 0 && two.tau_max == 2,
        format!(
            "ordering held on {}/100 traces (n {}..={}, T {}..={}); two-client example tau_max = {}",
            100 - failures,
            sizes.0,
            sizes.1,
            sizes.2,
            sizes.3,
            two.tau_max
        ),
    )
}

/// 10. Per-round and end-to-end communication ratios for Top 3%.
fn communication() -> Verdict {
    let d = 200;
    let k = 6;
    let spec = CompressorSpec::Topk { k };
    let closed_form = (32.0 * d as f64) / (k as f64 * (32.0 + 8.0));
    let per_round = per_round_ratio(&spec, d);
    let exact = per_round == closed_form && payload_bits(&spec, d) == 240;

    let base = with(&RunConfig::default(), |c| {
        c.eta = 0.02;
        c.compressor = topk(0.03);
    });
    let fl = run(&base).unwrap();
    let ef = run(&with(&base, |c| c.framework = Framework::AsynflcEf)).unwrap();
    let threshold = 0.1;
    let ratio = compression_ratio(&fl.series, &ef.series, ThresholdMetric::Gap, threshold);
    let (ok, detail) = match ratio {
        CommRatio::Ratio {
            baseline_bits,
            compressed_bits,
            ratio,
        } => (
            ratio > 10.0,
            format!(
                "end-to-end at f - f* <= {threshold}: {baseline_bits} vs {compressed_bits} bits = {ratio:.2}x > 10x"
            ),
        ),
        CommRatio::NotReached {
            baseline_reached,
            compressed_reached,
        } => (
            false,
            format!("threshold not reached (AsynFL {baseline_reached}, EF {compressed_reached})"),
        ),
    };
    verdict(
        exact && ok,
        format!("per-round ratio {per_round:.4} = 6400/240 exactly: {exact}; {detail}"),
    )
}

/// 11. Identical seeds give byte-identical CSV output.
fn determinism() -> Verdict {
    let configs = [
        with(&RunConfig::default(), |c| {
            c.seed = 7;
            c.rounds = 300;
        }),
        with(&RunConfig::default(), |c| {
            c.seed = 3;
            c.rounds = 300;
            c.framework = Framework::AsynflcEf;
            c.compressor = CompressorConfig::TopkThenQsgd {
                k: None,
                k_frac: Some(0.05),
                s: 3,
            };
        }),
    ];
    let mut all = true;
    let mut sizes = Vec::new();
    for cfg in &configs {
        let a = run(cfg).unwrap().series.to_csv_bytes().unwrap();
        let b = run(cfg).unwrap().series.to_csv_bytes().unwrap();
        all &= a == b;
        sizes.push(a.len());
    }
    verdict(
        all,
        format!("two configs rerun, CSV byte-identical: {all} ({sizes:?} bytes)"),
    )
}

fn main() {
    type Criterion = (&'static str, fn() -> Verdict);
    let criteria: [Criterion; 11] = [
        ("compressor contract", compressor_contract),
        ("EF telescoping", ef_telescoping),
        ("EF residual decay", residual_decay),
        ("EF parity with AsynFL", ef_parity),
        ("no-EF plateau", no_ef_plateau),
        ("stability condition", stability_condition),
        ("sign non-convergence", sign_non_convergence),
        ("degeneracy oracles", degeneracy),
        ("delay statistics", delay_statistics),
        ("communication accounting", communication),
        ("determinism", determinism),
    ];
    let start = Instant::now();
    let verdicts: Vec<(Verdict, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = criteria
            .iter()
            .map(|(_, f)| {
                s.spawn(move || {
                    let t = Instant::now();
                    let v = f();
                    (v, t.elapsed().as_secs_f64())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut failed = 0;
    for (i, ((name, _), (v, secs))) in criteria.iter().zip(&verdicts).enumerate() {
        let tag = if v.passed { "PASS" } else { "FAIL" };
        failed += (!v.passed) as usize;
        println!(
            "criterion {:>2} {tag} {name} ({secs:.1}s): {}",
            i + 1,
            v.detail
        );
    }
    println!(
        "acceptance: {}/{} criteria passed in {:.1}s",
        criteria.len() - failed,
        criteria.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
