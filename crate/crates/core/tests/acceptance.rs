//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use adaptive_regret::cli::config::{builtin_config, EstimatorKind, ExperimentConfig, Overrides};
use adaptive_regret::cli::scenarios::{self, BuiltScenario, ScenarioRef};
use adaptive_regret::estimators::{rpl_batch_oracle, ParameterEstimator, RegressionHistory, RlsffState, RplState};
use adaptive_regret::excitation::{pe_check, prefix_lambda_min, rlsff_constant, se_detect, window_lambda_min};
use adaptive_regret::linalg::{self, Matrix};
use adaptive_regret::oracle::{
    periodic_stream, random_stream, random_vector, RATIO_FLOOR, SCALAR_HAND_REGRET, SCALAR_HAND_THETA,
};
use adaptive_regret::regret::{
    assess_bounds, plateau_gap, run_experiment, BoundAssessment, Experiment, ExperimentSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn relative(a: &[f64], b: &[f64]) -> f64 {
    linalg::norm(&linalg::sub(a, b)) / linalg::norm(b).max(f64::MIN_POSITIVE)
}

fn error_norm(theta: &[f64], theta_star: &[f64]) -> f64 {
    linalg::norm(&linalg::sub(theta, theta_star))
}

/// Criterion 1: Iterated RPL steps equal the dense proximal solve.
fn recursive_vs_batch() -> Verdict {
    const TOL: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (p, n, m) = (rng.gen_range(1..=5), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let len = rng.gen_range(1..=200);
        let stream = random_stream(&mut rng, p, n, m, len);
        let epsilon = 10f64.powf(rng.gen_range(-1.0..1.0));
        let mut state = RplState::new(epsilon, random_vector(&mut rng, p)).unwrap();
        let mut history = RegressionHistory::new();
        for o in &stream.observations {
            let prev = state.theta().to_vec();
            state = state.step(&o.phi, &o.b, &o.y).unwrap();
            history.push(&o.phi, &o.b, &o.y).unwrap();
            let batch = rpl_batch_oracle(&history, &prev, epsilon).unwrap();
            worst = worst.max(relative(state.theta(), &batch));
        }
    }
    verdict(
        worst <= TOL,
        format!("1000 streams, max relative deviation {worst:.3e} (tol {TOL:e})"),
    )
}

/// Criterion 2: Per-step contraction with the measured prefix excitation, and nonexpansiveness.
fn rpl_contraction() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut streams, mut ratio_excess, mut expansion) = (0, f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut checked_steps = 0usize;
    while streams < 200 {
        let (p, n, m) = (rng.gen_range(1..=4), rng.gen_range(1..=3), rng.gen_range(1..=2));
        let len = rng.gen_range(p..=80);
        let stream = random_stream(&mut rng, p, n, m, len);
        let curve = prefix_lambda_min(&stream.blocks()).unwrap();
        if curve.last().copied().unwrap_or(0.0) <= 1e-6 {
            continue;
        }
        streams += 1;
        let epsilon = 10f64.powf(rng.gen_range(-1.0..2.0));
        let mut state = RplState::new(epsilon, random_vector(&mut rng, p)).unwrap();
        for (k, o) in stream.observations.iter().enumerate() {
            let before = error_norm(state.theta(), &stream.theta_star);
            state = state.step(&o.phi, &o.b, &o.y).unwrap();
            let after = error_norm(state.theta(), &stream.theta_star);
            expansion = expansion.max(after - before);
            if before > RATIO_FLOOR {
                let eta = epsilon / (curve[k].max(0.0) + epsilon);
                ratio_excess = ratio_excess.max(after / before - eta);
                checked_steps += 1;
            }
        }
    }
    verdict(
        ratio_excess <= 1e-9 && expansion <= 1e-12,
        format!(
            "200 SE streams, {checked_steps} steps with ‖θ̃‖ > {RATIO_FLOOR:e}: max(ratio - η_k) {ratio_excess:.3e} (tol 1e-9), max step growth {expansion:.3e} (tol 1e-12)"
        ),
    )
}

/// Criterion 3: Forgetting-factor envelope on periodic PE streams. `T_s` is the sample
/// count of one full window (the period).
fn rlsff_decay() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut streams, mut worst) = (0, f64::NEG_INFINITY);
    while streams < 100 {
        let (p, n) = (rng.gen_range(1..=4), rng.gen_range(1..=3));
        let period = rng.gen_range(p.max(2)..=3 * p + 2);
        let len = 200;
        let stream = periodic_stream(&mut rng, p, n, 1, period, len);
        let blocks = stream.blocks();
        let window = period - 1;
        let min_window = window_lambda_min(&blocks, window)
            .unwrap()
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        let delta = 0.999 * min_window;
        if delta <= 1e-3 || !pe_check(&blocks, delta, window).unwrap().satisfied {
            continue;
        }
        streams += 1;
        let lambda_sq = rng.gen_range(0.5..0.999);
        let epsilon = delta * 10f64.powf(rng.gen_range(-1.0..1.0));
        let ts = window + 1;
        let c_r = rlsff_constant(epsilon, delta, lambda_sq, ts).unwrap();
        let theta0 = random_vector(&mut rng, p);
        let err0 = error_norm(&theta0, &stream.theta_star);
        let mut state = RlsffState::new(epsilon, lambda_sq, theta0, false).unwrap();
        let lambda = lambda_sq.sqrt();
        for k in 1..=len {
            let o = &stream.observations[k - 1];
            state.observe(&o.phi, &o.b, &o.y).unwrap();
            if k >= ts {
                let bound = c_r * lambda.powi((k - ts) as i32) * err0;
                worst = worst.max(error_norm(state.estimate(), &stream.theta_star) - bound);
            }
        }
    }
    verdict(
        worst <= 1e-9,
        format!("100 periodic streams, max(‖θ̃_k‖ - c_r λ^(k-T_s) ‖θ̃_0‖) {worst:.3e} (tol 1e-9)"),
    )
}

fn build(cfg: &ExperimentConfig) -> BuiltScenario {
    let inline = scenarios::resolve_inline(&cfg.scenario, cfg.seed);
    scenarios::build(&inline, cfg.horizon).unwrap()
}

fn run(built: &BuiltScenario, cfg: &ExperimentConfig, kind: EstimatorKind) -> (Experiment, BoundAssessment) {
    let estimator = cfg.estimator.config(kind);
    let exp = run_experiment(&ExperimentSpec {
        model: &built.model,
        estimator: &estimator,
        x0: &cfg.x0,
        horizon: cfg.horizon,
        cost: cfg.cost,
        delta: cfg.excitation.delta,
        ts_hint: cfg.excitation.ts_hint,
    })
    .unwrap();
    let assessment = assess_bounds(&built.model, &estimator, &exp, &cfg.ediss).unwrap();
    (exp, assessment)
}

/// Criterion 4: The scalar fixture through the scenario registry.
fn scalar_hand() -> Verdict {
    let cfg = builtin_config(
        "scalar-hand",
        &Overrides {
            horizon: Some(3),
            ..Overrides::default()
        },
    )
    .unwrap();
    let built = build(&cfg);
    let (exp, _) = run(&built, &cfg, EstimatorKind::Rpl);
    let mut thetas: Vec<f64> = exp.closed.estimates.as_ref().unwrap().iter().map(|t| t[0]).collect();
    thetas.push(exp.final_estimate[0]);
    let theta_dev = thetas
        .iter()
        .zip(SCALAR_HAND_THETA)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let regret_dev = (exp.trace.total() - SCALAR_HAND_REGRET).abs();
    verdict(
        theta_dev <= 1e-12 && regret_dev <= 1e-12,
        format!("θ deviation {theta_dev:.3e}, |R_3 - 0.5| {regret_dev:.3e} (tol 1e-12)"),
    )
}

/// Criterion 5: Certification and plateau on exactly matched scenarios, both controllers.
fn certification() -> Verdict {
    let horizon = Overrides {
        horizon: Some(2000),
        ..Overrides::default()
    };
    let mut configs = vec![builtin_config("mrac-matched", &horizon).unwrap()];
    for seed in 0..20u64 {
        let mut cfg = builtin_config("random-matched", &horizon).unwrap();
        cfg.seed = seed;
        let inline = scenarios::resolve_inline(&ScenarioRef::Named("random-matched".into()), seed);
        cfg.estimator.theta0 = scenarios::random_matched(seed).1;
        cfg.x0 = vec![0.0; scenarios::dims(&inline).unwrap().0];
        configs.push(cfg);
    }
    let (mut runs, mut certified, mut plateaued, mut ediss_ok) = (0, 0, 0, 0);
    let (mut worst_gap, mut min_slack) = (0.0f64, f64::INFINITY);
    let mut failures = Vec::new();
    for cfg in &configs {
        let built = build(cfg);
        for kind in [EstimatorKind::Rpl, EstimatorKind::Rlsff] {
            runs += 1;
            let (exp, assessment) = run(&built, cfg, kind);
            let label = format!("{}#{} {}", cfg.scenario.label(), cfg.seed, kind.name());
            if assessment.ediss_check.is_some_and(|r| r.passed) {
                ediss_ok += 1;
            }
            match assessment.certification {
                Some(c) if c.passed => {
                    certified += 1;
                    min_slack = min_slack.min(c.slack_ratio);
                }
                _ => failures.push(label.clone()),
            }
            let gap = plateau_gap(&exp.trace);
            worst_gap = worst_gap.max(gap);
            if gap <= 1e-6 {
                plateaued += 1;
            } else {
                failures.push(format!("{label} plateau {gap:.2e}"));
            }
        }
    }
    let passed = certified == runs && plateaued == runs && ediss_ok == runs;
    let mut detail = format!(
        "{certified}/{runs} certified, {ediss_ok}/{runs} certificates verified, {plateaued}/{runs} plateaued (worst gap {worst_gap:.2e}, tol 1e-6), min bound/regret {min_slack:.3}"
    );
    if !failures.is_empty() {
        detail.push_str(&format!("; failing: {}", failures.join(", ")));
    }
    verdict(passed, detail)
}

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_adaptive-regret")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Criterion 6: `compare` on the reference example: both track, RPL has less regret.
fn compare_paper() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(binary())
        .args(["compare", "--scenario", "mrac-paper", "--format", "json", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    if !status.status.success() {
        return verdict(
            false,
            format!("compare failed: {}", String::from_utf8_lossy(&status.stderr)),
        );
    }
    let v = read_json(&dir.path().join("mrac-paper_compare.json"));
    let num = |p: &str| v.pointer(p).and_then(Value::as_f64).unwrap_or(f64::NAN);
    let (e_rpl, e_rlsff) = (num("/rpl/final_state_norm"), num("/rlsff/final_state_norm"));
    let (r_rpl, r_rlsff) = (num("/rpl/regret_total"), num("/rlsff/regret_total"));
    verdict(
        e_rpl <= 1e-2 && e_rlsff <= 1e-2 && r_rpl < r_rlsff,
        format!(
            "T = {}: ‖e_T‖ rpl {e_rpl:.3e}, rlsff {e_rlsff:.3e} (tol 1e-2); R_T rpl {r_rpl:.4} < rlsff {r_rlsff:.4}",
            v["horizon"]
        ),
    )
}

fn brute_lambda_min(blocks: &[Matrix], p: usize) -> f64 {
    let mut g = nalgebra::DMatrix::<f64>::zeros(p, p);
    for f in blocks {
        let f = nalgebra::DMatrix::from_row_slice(f.rows(), f.cols(), f.as_slice());
        g += &f * f.transpose();
    }
    g.symmetric_eigen().eigenvalues.min()
}

/// Criterion 7: Excitation detectors against independent eigen-decompositions of every prefix and window.
fn excitation_bruteforce() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut mismatches = 0;
    for _ in 0..500 {
        let (p, n) = (rng.gen_range(1..=4), rng.gen_range(1..=3));
        let len = rng.gen_range(2..=40);
        let blocks = random_stream(&mut rng, p, n, 1, len).blocks();
        let delta = rng.gen_range(0.05..3.0);
        let ts = rng.gen_range(0..len);
        let brute_se = (0..len).find(|&k| brute_lambda_min(&blocks[..=k], p) >= delta);
        if se_detect(&blocks, delta).unwrap() != brute_se {
            mismatches += 1;
        }
        let brute_pe = (0..len - ts).all(|k0| brute_lambda_min(&blocks[k0..=k0 + ts], p) >= delta);
        if pe_check(&blocks, delta, ts).unwrap().satisfied != brute_pe {
            mismatches += 1;
        }
    }
    verdict(
        mismatches == 0,
        format!("500 streams, {mismatches} disagreements (tol 0)"),
    )
}

/// Criterion 8: Every builtin scenario, run as configured, drives the state to the origin.
fn asymptotic_stability() -> Verdict {
    let mut parts = Vec::new();
    let mut passed = true;
    for name in scenarios::BUILTIN_NAMES {
        let cfg = builtin_config(name, &Overrides::default()).unwrap();
        let built = build(&cfg);
        let (exp, _) = run(&built, &cfg, cfg.estimator.kind);
        let excited = match cfg.estimator.kind {
            EstimatorKind::Rpl => exp.excitation.detected_ts.is_some(),
            EstimatorKind::Rlsff => exp.excitation.pe_ts.is_some(),
        };
        if !excited {
            parts.push(format!("{name} (not excited, skipped)"));
            continue;
        }
        let norm = linalg::norm(exp.closed.final_state());
        passed &= norm <= 1e-6;
        parts.push(format!(
            "{name} T={} {}: {norm:.2e}",
            cfg.horizon,
            cfg.estimator.kind.name()
        ));
    }
    verdict(passed, format!("‖x_T‖ (tol 1e-6): {}", parts.join(", ")))
}

/// Criterion 9: Two `simulate` runs per builtin produce the same CSV bytes.
fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut identical = 0;
    for name in scenarios::BUILTIN_NAMES {
        let mut outputs = Vec::new();
        for run in ["first", "second"] {
            let out = dir.path().join(run);
            let status = Command::new(binary())
                .args(["simulate", "--scenario", name, "--format", "csv", "--out"])
                .arg(&out)
                .output()
                .unwrap();
            outputs.push(
                status
                    .status
                    .success()
                    .then(|| std::fs::read(out.join(format!("{name}.csv"))).unwrap()),
            );
        }
        if outputs[0].is_some() && outputs[0] == outputs[1] {
            identical += 1;
        }
    }
    let total = scenarios::BUILTIN_NAMES.len();
    verdict(
        identical == total,
        format!("{identical}/{total} builtin scenarios byte-identical"),
    )
}

fn main() {
    type Check = (u8, &'static str, fn() -> Verdict, Option<Duration>);
    let checks: [Check; 9] = [
        (
            1,
            "recursive/batch RPL equivalence",
            recursive_vs_batch,
            Some(Duration::from_secs(30)),
        ),
        (2, "RPL contraction", rpl_contraction, Some(Duration::from_secs(10))),
        (3, "RLSFF decay", rlsff_decay, Some(Duration::from_secs(10))),
        (4, "scalar hand fixture", scalar_hand, None),
        (5, "regret certification", certification, Some(Duration::from_secs(60))),
        (6, "MRAC example comparison", compare_paper, None),
        (
            7,
            "excitation oracles",
            excitation_bruteforce,
            Some(Duration::from_secs(10)),
        ),
        (8, "asymptotic stability", asymptotic_stability, None),
        (9, "determinism", determinism, None),
    ];
    let mut failed = 0;
    for (id, name, check, limit) in checks {
        let start = Instant::now();
        let v = check();
        let elapsed = start.elapsed();
        let in_time = limit.is_none_or(|l| elapsed <= l);
        let passed = v.passed && in_time;
        failed += usize::from(!passed);
        let budget = limit.map(|l| format!(" / {}s", l.as_secs())).unwrap_or_default();
        println!(
            "[{}] {id}. {name}: {} [{:.2}s{budget}]",
            if passed { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
