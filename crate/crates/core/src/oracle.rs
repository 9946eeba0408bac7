//! Seeded fixtures that cross-check the recursive estimators and the
//! excitation monitors against dense recomputations.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{FeatureMap, LinearPlant, SystemModel};
use crate::estimators::{
    regressor_block, rlsff_batch_oracle, rpl_batch_oracle, ParameterEstimator, RegressionHistory, RlsffState, RplState,
};
use crate::excitation::{first_crossing, pe_check, prefix_lambda_min};
use crate::linalg::{self, sym_eig_extrema, Matrix};

/// Parameter errors below this are dominated by rounding, so per-step ratios
/// are only checked above it.
pub const RATIO_FLOOR: f64 = 1e-6;

/// One observation `(φ, B, y)` with `y = B φᵀ θ*`.
#[derive(Clone, Debug)]
pub struct Observation {
    pub phi: Matrix,
    pub b: Matrix,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RandomStream {
    pub theta_star: Vec<f64>,
    pub observations: Vec<Observation>,
}

impl RandomStream {
    pub fn blocks(&self) -> Vec<Matrix> {
        self.observations
            .iter()
            .map(|o| regressor_block(&o.phi, &o.b).expect("generated shapes agree"))
            .collect()
    }
}

fn gaussian_like(rng: &mut impl Rng) -> f64 {
    // sum of uniforms: cheap, bounded, roughly bell shaped
    (0..4).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>() * 0.5
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| gaussian_like(rng)).collect()).expect("finite entries")
}

pub fn random_vector(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| gaussian_like(rng)).collect()
}

/// Consistent stream of `len` random observations with dimensions `p, n, m`.
pub fn random_stream(rng: &mut impl Rng, p: usize, n: usize, m: usize, len: usize) -> RandomStream {
    let theta_star = random_vector(rng, p);
    let observations = (0..len)
        .map(|_| {
            let phi = random_matrix(rng, p, m);
            let b = random_matrix(rng, n, m);
            let y = b.mat_vec(&phi.tr_mat_vec(&theta_star));
            Observation { phi, b, y }
        })
        .collect();
    RandomStream {
        theta_star,
        observations,
    }
}

/// Periodic stream repeating `period` random blocks; excitation comes from the period as a whole.
pub fn periodic_stream(rng: &mut impl Rng, p: usize, n: usize, m: usize, period: usize, len: usize) -> RandomStream {
    let base = random_stream(rng, p, n, m, period);
    let observations = (0..len).map(|k| base.observations[k % period].clone()).collect();
    RandomStream {
        theta_star: base.theta_star,
        observations,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleOutcome {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    /// Worst observed discrepancy, in the units of `tolerance`.
    pub worst: f64,
    pub tolerance: f64,
}

fn relative(a: &[f64], b: &[f64]) -> f64 {
    linalg::norm(&linalg::sub(a, b)) / linalg::norm(b).max(f64::MIN_POSITIVE)
}

/// Iterated RPL steps against the dense proximal solve anchored at the previous iterate.
pub fn rpl_recursive_vs_batch(seed: u64, cases: usize, max_horizon: usize) -> OracleOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (p, n, m) = (rng.gen_range(1..=5), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let len = rng.gen_range(1..=max_horizon);
        let stream = random_stream(&mut rng, p, n, m, len);
        let epsilon = 10f64.powf(rng.gen_range(-1.0..1.0));
        let mut state = RplState::new(epsilon, random_vector(&mut rng, p)).expect("valid");
        let mut history = RegressionHistory::new();
        for o in &stream.observations {
            let prev = state.theta().to_vec();
            state.observe(&o.phi, &o.b, &o.y).expect("well posed");
            history.push(&o.phi, &o.b, &o.y).expect("shapes agree");
            let batch = rpl_batch_oracle(&history, &prev, epsilon).expect("well posed");
            worst = worst.max(relative(state.theta(), &batch));
        }
    }
    OracleOutcome {
        name: "rpl recursive vs batch proximal".into(),
        passed: worst <= 1e-9,
        cases,
        worst,
        tolerance: 1e-9,
    }
}

/// Iterated RLSFF steps against the dense minimizer of the discounted cost.
pub fn rlsff_recursive_vs_weighted(seed: u64, cases: usize, max_horizon: usize) -> OracleOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (p, n, m) = (rng.gen_range(1..=4), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let len = rng.gen_range(1..=max_horizon);
        let stream = random_stream(&mut rng, p, n, m, len);
        let epsilon = 10f64.powf(rng.gen_range(-1.0..1.0));
        let lambda_sq = rng.gen_range(0.8..0.999);
        let theta0 = random_vector(&mut rng, p);
        let mut state = RlsffState::new(epsilon, lambda_sq, theta0.clone(), false).expect("valid");
        let mut history = RegressionHistory::new();
        for o in &stream.observations {
            state.observe(&o.phi, &o.b, &o.y).expect("well posed");
            history.push(&o.phi, &o.b, &o.y).expect("shapes agree");
            let dense = rlsff_batch_oracle(&history, &theta0, epsilon, lambda_sq).expect("well posed");
            worst = worst.max(relative(state.theta(), &dense));
        }
    }
    OracleOutcome {
        name: "rlsff recursive vs weighted normal equations".into(),
        passed: worst <= 1e-8,
        cases,
        worst,
        tolerance: 1e-8,
    }
}

/// Scalar plant `x⁺ = 0.5x + (u - θ*)`, `θ* = 1`, RPL with `ε = 1` from `θ_0 = 0`, `x_0 = 1`.
pub fn scalar_hand_model() -> SystemModel {
    let plant = LinearPlant::new(
        Matrix::scaled_identity(1, 0.5),
        Matrix::identity(1),
        FeatureMap::Constant {
            phi: Matrix::identity(1),
        },
    )
    .expect("scalar shapes agree");
    SystemModel::new(Arc::new(plant), vec![1.0]).expect("one parameter")
}

/// Hand-computed values for the scalar plant over three steps.
pub const SCALAR_HAND_THETA: [f64; 4] = [0.0, 0.5, 5.0 / 6.0, 23.0 / 24.0];
pub const SCALAR_HAND_STATES: [f64; 4] = [1.0, -0.5, -0.75, -0.375 - 1.0 / 6.0];
pub const SCALAR_HAND_REGRET: f64 = 0.5;

pub fn scalar_hand_rollout() -> OracleOutcome {
    let model = scalar_hand_model();
    let mut est = RplState::new(1.0, vec![0.0]).expect("valid");
    let traj = model.rollout_closed_loop(&mut est, &[1.0], 3).expect("finite");
    let bench = model.rollout_benchmark(&[1.0], 3).expect("finite");
    let mut worst: f64 = 0.0;
    for (k, th) in traj.estimates.iter().flatten().enumerate() {
        worst = worst.max((th[0] - SCALAR_HAND_THETA[k]).abs());
    }
    worst = worst.max((est.theta()[0] - SCALAR_HAND_THETA[3]).abs());
    for (k, x) in traj.states.iter().enumerate() {
        worst = worst.max((x[0] - SCALAR_HAND_STATES[k]).abs());
    }
    let regret: f64 = (0..3)
        .map(|k| traj.states[k][0].powi(2) - bench.states[k][0].powi(2))
        .sum();
    worst = worst.max((regret - SCALAR_HAND_REGRET).abs());
    OracleOutcome {
        name: "scalar hand rollout".into(),
        passed: worst <= 1e-12,
        cases: 1,
        worst,
        tolerance: 1e-12,
    }
}

fn dense_lambda_min(blocks: &[Matrix], p: usize) -> f64 {
    let mut g = Matrix::zeros(p, p);
    for f in blocks {
        g = g.add(&f.matmul(&f.transpose()));
    }
    g.symmetrize();
    sym_eig_extrema(&g).expect("square").0
}

/// Sufficient and persistent excitation detection against per-prefix and
/// per-window recomputation from scratch. Counts disagreements.
pub fn excitation_vs_bruteforce(seed: u64, cases: usize) -> OracleOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    for _ in 0..cases {
        let (p, n) = (rng.gen_range(1..=4), rng.gen_range(1..=3));
        let len = rng.gen_range(2..=40);
        let blocks = random_stream(&mut rng, p, n, 1, len).blocks();
        let delta = rng.gen_range(0.05..3.0);
        let ts = rng.gen_range(0..len);
        let curve = prefix_lambda_min(&blocks).expect("consistent shapes");
        let brute_se = (0..len).find(|&k| dense_lambda_min(&blocks[..=k], p) >= delta);
        if first_crossing(&curve, delta) != brute_se {
            mismatches += 1;
        }
        let brute_pe = (0..len - ts).all(|k0| dense_lambda_min(&blocks[k0..=k0 + ts], p) >= delta);
        if pe_check(&blocks, delta, ts).expect("long enough").satisfied != brute_pe {
            mismatches += 1;
        }
    }
    OracleOutcome {
        name: "excitation detection vs brute force".into(),
        passed: mismatches == 0,
        cases,
        worst: mismatches as f64,
        tolerance: 0.0,
    }
}

/// Per-step RPL contraction `‖θ̃_k‖ ≤ ε/(δ_k+ε) ‖θ̃_{k-1}‖` with `δ_k` the
/// measured prefix `λ_min`, plus nonexpansiveness at every step.
pub fn rpl_contraction(seed: u64, cases: usize, max_horizon: usize) -> OracleOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..cases {
        let (p, n, m) = (rng.gen_range(1..=4), rng.gen_range(1..=3), rng.gen_range(1..=2));
        let len = rng.gen_range(p..=max_horizon.max(p));
        let stream = random_stream(&mut rng, p, n, m, len);
        let blocks = stream.blocks();
        let curve = prefix_lambda_min(&blocks).expect("consistent shapes");
        let epsilon = 10f64.powf(rng.gen_range(0.0..2.0));
        let mut state = RplState::new(epsilon, random_vector(&mut rng, p)).expect("valid");
        for (k, o) in stream.observations.iter().enumerate() {
            let before = linalg::norm(&linalg::sub(state.theta(), &stream.theta_star));
            state.observe(&o.phi, &o.b, &o.y).expect("well posed");
            let after = linalg::norm(&linalg::sub(state.theta(), &stream.theta_star));
            worst = worst.max(after - before - 1e-12);
            if before > RATIO_FLOOR {
                let eta = epsilon / (curve[k].max(0.0) + epsilon);
                worst = worst.max(after / before - eta - 1e-9);
            }
        }
    }
    OracleOutcome {
        name: "rpl per-step contraction".into(),
        passed: worst <= 0.0,
        cases,
        worst,
        tolerance: 0.0,
    }
}

pub fn run_all(seed: u64) -> Vec<OracleOutcome> {
    vec![
        rpl_recursive_vs_batch(seed, 100, 100),
        rlsff_recursive_vs_weighted(seed.wrapping_add(1), 100, 100),
        scalar_hand_rollout(),
        excitation_vs_bruteforce(seed.wrapping_add(2), 200),
        rpl_contraction(seed.wrapping_add(3), 100, 60),
    ]
}
