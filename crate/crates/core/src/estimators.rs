//! Recursive parameter estimators for the matched uncertainty `φ_kᵀ θ*`.
//!
//! Both estimators consume one observation `(φ_k, B_k, y_k)` per step, where
//! `y_k = B_k φ_kᵀ θ*` is the innovation recovered from the state update. The
//! regressor block `F_k = φ_k B_kᵀ` (p x n) drives every update.
//!
//! * [`RplState`] is the recursive proximal learner: the proximal step of the
//!   running least-squares cost anchored at the previous estimate.
//! * [`RlsffState`] is recursive least squares with exponential forgetting.
//!
//! Neither update forms an explicit inverse; each step does one Cholesky solve.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, gram_accumulate, spd_solve, LinalgError, Matrix};

/// Forgetting factors below this are refused unless explicitly allowed.
pub const MIN_FORGETTING: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid estimator configuration: {0}")]
    Config(String),
    #[error("history is inconsistent with the supplied parameter: {0}")]
    InconsistentHistory(String),
}

/// Source of parameter estimates for a certainty-equivalence controller.
///
/// A controller only sees the current estimate and feeds back observed data.
/// The observation for step `k` is supplied after the state update, so the
/// estimate read at step `k` depends on data through `k - 1` only.
pub trait ParameterEstimator {
    fn estimate(&self) -> &[f64];

    fn observe(&mut self, phi: &Matrix, b: &Matrix, y: &[f64]) -> Result<(), EstimatorError>;

    /// Number of observations consumed.
    fn steps(&self) -> usize;
}

/// `F = φ Bᵀ`, the p x n regressor block of one observation.
pub fn regressor_block(phi: &Matrix, b: &Matrix) -> Result<Matrix, EstimatorError> {
    if phi.cols() != b.cols() {
        return Err(EstimatorError::DimensionMismatch(format!(
            "features are {}x{} but input matrix is {}x{}",
            phi.rows(),
            phi.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(phi.matmul(&b.transpose()))
}

fn check_observation(p: usize, phi: &Matrix, b: &Matrix, y: &[f64]) -> Result<Matrix, EstimatorError> {
    if phi.rows() != p {
        return Err(EstimatorError::DimensionMismatch(format!(
            "features have {} rows, estimator has {p} parameters",
            phi.rows()
        )));
    }
    if y.len() != b.rows() {
        return Err(EstimatorError::DimensionMismatch(format!(
            "innovation has length {}, input matrix has {} rows",
            y.len(),
            b.rows()
        )));
    }
    regressor_block(phi, b)
}

/// `B φᵀ θ - y`, evaluated in the same order the plant uses for `B (φᵀ θ)`.
fn prediction_error(phi: &Matrix, b: &Matrix, theta: &[f64], y: &[f64]) -> Vec<f64> {
    linalg::sub(&b.mat_vec(&phi.tr_mat_vec(theta)), y)
}

fn check_epsilon(epsilon: f64) -> Result<(), EstimatorError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(EstimatorError::Config(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    Ok(())
}

fn check_theta(theta: &[f64]) -> Result<(), EstimatorError> {
    if theta.is_empty() || theta.iter().any(|v| !v.is_finite()) {
        return Err(EstimatorError::Config(
            "initial estimate must be a non-empty finite vector".into(),
        ));
    }
    Ok(())
}

/// Recursive proximal learning state.
///
/// Invariant: `p_inv == h + ε I` up to rounding, since both start from the
/// same point (`εI` and `0`) and receive identical Gram increments.
///
/// The step residual `H_{k+1} θ_k - s_{k+1}` is carried as
/// `ε (θ_{k-1} - θ_k) + F_k (B_k φ_kᵀ θ_k - y_k)`, using the identity
/// `H_k θ_k - s_k = ε (θ_{k-1} - θ_k)`. This avoids the cancellation in
/// `H θ - s` once both accumulators are large, and keeps `θ*` a bitwise
/// fixed point when the innovations are exact.
#[derive(Clone, Debug, PartialEq)]
pub struct RplState {
    epsilon: f64,
    theta: Vec<f64>,
    p_inv: Matrix,
    h: Matrix,
    s: Vec<f64>,
    last_correction: Vec<f64>,
    k: usize,
}

impl RplState {
    pub fn new(epsilon: f64, theta0: Vec<f64>) -> Result<Self, EstimatorError> {
        check_epsilon(epsilon)?;
        check_theta(&theta0)?;
        let p = theta0.len();
        Ok(Self {
            epsilon,
            p_inv: Matrix::scaled_identity(p, epsilon),
            h: Matrix::zeros(p, p),
            s: vec![0.0; p],
            last_correction: vec![0.0; p],
            theta: theta0,
            k: 0,
        })
    }

    /// One recursive proximal step; returns the successor state.
    pub fn step(&self, phi: &Matrix, b: &Matrix, y: &[f64]) -> Result<Self, EstimatorError> {
        let mut next = self.clone();
        next.observe(phi, b, y)?;
        Ok(next)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }
    pub fn p_inv(&self) -> &Matrix {
        &self.p_inv
    }
    pub fn h(&self) -> &Matrix {
        &self.h
    }
    pub fn s(&self) -> &[f64] {
        &self.s
    }
    pub fn k(&self) -> usize {
        self.k
    }
}

impl ParameterEstimator for RplState {
    fn estimate(&self) -> &[f64] {
        &self.theta
    }

    fn observe(&mut self, phi: &Matrix, b: &Matrix, y: &[f64]) -> Result<(), EstimatorError> {
        let f = check_observation(self.theta.len(), phi, b, y)?;
        let p_inv = gram_accumulate(&self.p_inv, &f)?;
        let h = gram_accumulate(&self.h, &f)?;
        let s = linalg::add(&self.s, &f.mat_vec(y));
        let gradient = phi.mat_vec(&b.tr_mat_vec(&prediction_error(phi, b, &self.theta, y)));
        let residual: Vec<f64> = self
            .last_correction
            .iter()
            .zip(&gradient)
            .map(|(c, g)| self.epsilon * c + g)
            .collect();
        let correction = spd_solve(&p_inv, &residual)?;
        self.theta = linalg::sub(&self.theta, &correction);
        self.last_correction = correction;
        self.p_inv = p_inv;
        self.h = h;
        self.s = s;
        self.k += 1;
        Ok(())
    }

    fn steps(&self) -> usize {
        self.k
    }
}

/// Recursive least squares with forgetting factor `λ²`.
#[derive(Clone, Debug, PartialEq)]
pub struct RlsffState {
    epsilon: f64,
    lambda_sq: f64,
    theta: Vec<f64>,
    p_inv: Matrix,
    k: usize,
}

impl RlsffState {
    /// Refuses `λ² < 0.5` unless `allow_low_forgetting` is set.
    pub fn new(
        epsilon: f64,
        lambda_sq: f64,
        theta0: Vec<f64>,
        allow_low_forgetting: bool,
    ) -> Result<Self, EstimatorError> {
        check_epsilon(epsilon)?;
        check_theta(&theta0)?;
        if !(lambda_sq > 0.0 && lambda_sq < 1.0) {
            return Err(EstimatorError::Config(format!(
                "lambda_squared must lie in (0, 1), got {lambda_sq}"
            )));
        }
        if lambda_sq < MIN_FORGETTING && !allow_low_forgetting {
            return Err(EstimatorError::Config(format!(
                "lambda_squared = {lambda_sq} is below {MIN_FORGETTING}; low forgetting factors are \
                 poorly conditioned (override with allow_low_forgetting)"
            )));
        }
        let p = theta0.len();
        Ok(Self {
            epsilon,
            lambda_sq,
            p_inv: Matrix::scaled_identity(p, epsilon),
            theta: theta0,
            k: 0,
        })
    }

    pub fn step(&self, phi: &Matrix, b: &Matrix, y: &[f64]) -> Result<Self, EstimatorError> {
        let mut next = self.clone();
        next.observe(phi, b, y)?;
        Ok(next)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
    pub fn lambda_sq(&self) -> f64 {
        self.lambda_sq
    }
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }
    pub fn p_inv(&self) -> &Matrix {
        &self.p_inv
    }
    pub fn k(&self) -> usize {
        self.k
    }
}

impl ParameterEstimator for RlsffState {
    fn estimate(&self) -> &[f64] {
        &self.theta
    }

    fn observe(&mut self, phi: &Matrix, b: &Matrix, y: &[f64]) -> Result<(), EstimatorError> {
        let f = check_observation(self.theta.len(), phi, b, y)?;
        let p_inv = gram_accumulate(&self.p_inv.scale(self.lambda_sq), &f)?;
        let gradient = phi.mat_vec(&b.tr_mat_vec(&prediction_error(phi, b, &self.theta, y)));
        let correction = spd_solve(&p_inv, &gradient)?;
        self.theta = linalg::sub(&self.theta, &correction);
        self.p_inv = p_inv;
        self.k += 1;
        Ok(())
    }

    fn steps(&self) -> usize {
        self.k
    }
}

/// Which estimator to run and with what tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EstimatorConfig {
    Rpl {
        epsilon: f64,
        theta0: Vec<f64>,
    },
    Rlsff {
        epsilon: f64,
        lambda_squared: f64,
        theta0: Vec<f64>,
        #[serde(default)]
        allow_low_forgetting: bool,
    },
}

impl EstimatorConfig {
    pub fn build(&self) -> Result<AnyEstimator, EstimatorError> {
        match self {
            EstimatorConfig::Rpl { epsilon, theta0 } => Ok(AnyEstimator::Rpl(RplState::new(*epsilon, theta0.clone())?)),
            EstimatorConfig::Rlsff {
                epsilon,
                lambda_squared,
                theta0,
                allow_low_forgetting,
            } => Ok(AnyEstimator::Rlsff(RlsffState::new(
                *epsilon,
                *lambda_squared,
                theta0.clone(),
                *allow_low_forgetting,
            )?)),
        }
    }

    pub fn epsilon(&self) -> f64 {
        match self {
            EstimatorConfig::Rpl { epsilon, .. } | EstimatorConfig::Rlsff { epsilon, .. } => *epsilon,
        }
    }

    pub fn theta0(&self) -> &[f64] {
        match self {
            EstimatorConfig::Rpl { theta0, .. } | EstimatorConfig::Rlsff { theta0, .. } => theta0,
        }
    }

    pub fn theta0_mut(&mut self) -> &mut Vec<f64> {
        match self {
            EstimatorConfig::Rpl { theta0, .. } | EstimatorConfig::Rlsff { theta0, .. } => theta0,
        }
    }

    pub fn lambda_squared(&self) -> Option<f64> {
        match self {
            EstimatorConfig::Rpl { .. } => None,
            EstimatorConfig::Rlsff { lambda_squared, .. } => Some(*lambda_squared),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            EstimatorConfig::Rpl { .. } => "rpl",
            EstimatorConfig::Rlsff { .. } => "rlsff",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AnyEstimator {
    Rpl(RplState),
    Rlsff(RlsffState),
}

impl ParameterEstimator for AnyEstimator {
    fn estimate(&self) -> &[f64] {
        match self {
            AnyEstimator::Rpl(s) => s.estimate(),
            AnyEstimator::Rlsff(s) => s.estimate(),
        }
    }

    fn observe(&mut self, phi: &Matrix, b: &Matrix, y: &[f64]) -> Result<(), EstimatorError> {
        match self {
            AnyEstimator::Rpl(s) => s.observe(phi, b, y),
            AnyEstimator::Rlsff(s) => s.observe(phi, b, y),
        }
    }

    fn steps(&self) -> usize {
        match self {
            AnyEstimator::Rpl(s) => s.steps(),
            AnyEstimator::Rlsff(s) => s.steps(),
        }
    }
}

/// Stored observations `(F_i = φ_i B_iᵀ, y_i)` in arrival order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegressionHistory {
    blocks: Vec<(Matrix, Vec<f64>)>,
}

impl RegressionHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, phi: &Matrix, b: &Matrix, y: &[f64]) -> Result<(), EstimatorError> {
        let f = check_observation(phi.rows(), phi, b, y)?;
        if let Some((first, _)) = self.blocks.first() {
            if first.shape() != f.shape() {
                return Err(EstimatorError::DimensionMismatch(format!(
                    "regressor block {:?} differs from stored {:?}",
                    f.shape(),
                    first.shape()
                )));
            }
        }
        self.blocks.push((f, y.to_vec()));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&Matrix, &[f64])> {
        self.blocks.iter().map(|(f, y)| (f, y.as_slice()))
    }

    /// First `k` observations.
    pub fn prefix(&self, k: usize) -> RegressionHistory {
        RegressionHistory {
            blocks: self.blocks[..k].to_vec(),
        }
    }

    /// Stacked `Φ` with rows `B_i φ_iᵀ` (kn x p). Empty history gives 0 x 0.
    pub fn stacked_phi(&self) -> Matrix {
        let rows: Vec<Matrix> = self.blocks.iter().map(|(f, _)| f.transpose()).collect();
        Matrix::vstack(&rows).expect("blocks share a shape")
    }

    /// Stacked innovations `Y` (length kn).
    pub fn stacked_y(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|(_, y)| y.iter().copied()).collect()
    }

    fn check_param(&self, theta: &[f64]) -> Result<(), EstimatorError> {
        match self.blocks.first() {
            Some((f, _)) if f.rows() != theta.len() => Err(EstimatorError::DimensionMismatch(format!(
                "parameter of length {} against regressors with {} rows",
                theta.len(),
                f.rows()
            ))),
            _ => Ok(()),
        }
    }

    /// `(Σ w_i F_i F_iᵀ, Σ w_i F_i y_i)` with per-block weights.
    fn weighted_normal_equations(&self, p: usize, weight: impl Fn(usize) -> f64) -> (Matrix, Vec<f64>) {
        let mut gram = Matrix::zeros(p, p);
        let mut rhs = vec![0.0; p];
        for (i, (f, y)) in self.blocks.iter().enumerate() {
            let w = weight(i);
            gram = gram.add(&f.matmul(&f.transpose()).scale(w));
            for (r, v) in rhs.iter_mut().zip(f.mat_vec(y)) {
                *r += w * v;
            }
        }
        gram.symmetrize();
        (gram, rhs)
    }
}

/// Exact proximal step `argmin_θ h(θ) + (ε/2)‖θ - θ_prev‖²` from the full history.
pub fn rpl_batch_oracle(
    history: &RegressionHistory,
    theta_prev: &[f64],
    epsilon: f64,
) -> Result<Vec<f64>, EstimatorError> {
    check_epsilon(epsilon)?;
    history.check_param(theta_prev)?;
    let p = theta_prev.len();
    let (gram, rhs) = history.weighted_normal_equations(p, |_| 1.0);
    let lhs = gram.add(&Matrix::scaled_identity(p, epsilon));
    let rhs: Vec<f64> = rhs.iter().zip(theta_prev).map(|(r, t)| r + epsilon * t).collect();
    Ok(spd_solve(&lhs, &rhs)?)
}

/// Dense minimizer of [`online_cost_gf`] after `k = history.len()` observations:
/// `(Σ λ^{2(k-1-i)} F_i F_iᵀ + λ^{2k} ε I)⁻¹ (Σ λ^{2(k-1-i)} F_i y_i + λ^{2k} ε θ_0)`.
pub fn rlsff_batch_oracle(
    history: &RegressionHistory,
    theta0: &[f64],
    epsilon: f64,
    lambda_sq: f64,
) -> Result<Vec<f64>, EstimatorError> {
    check_epsilon(epsilon)?;
    if !(lambda_sq > 0.0 && lambda_sq < 1.0) {
        return Err(EstimatorError::Config(format!(
            "λ² must lie in (0, 1), got {lambda_sq}"
        )));
    }
    history.check_param(theta0)?;
    let p = theta0.len();
    let k = history.len();
    let (gram, rhs) = history.weighted_normal_equations(p, |i| lambda_sq.powi((k - 1 - i) as i32));
    let prior = lambda_sq.powi(k as i32) * epsilon;
    let lhs = gram.add(&Matrix::scaled_identity(p, prior));
    let rhs: Vec<f64> = rhs.iter().zip(theta0).map(|(r, t)| r + prior * t).collect();
    Ok(spd_solve(&lhs, &rhs)?)
}

/// Online estimation cost `h(θ) = ½‖Φθ - Y‖²`.
///
/// When `theta_star` is given, also checks that the stored innovations are
/// consistent with it, i.e. that `h` equals `½ Σ ‖F_iᵀ(θ - θ*)‖²` to 1e-10.
pub fn online_cost_h(
    history: &RegressionHistory,
    theta: &[f64],
    theta_star: Option<&[f64]>,
) -> Result<f64, EstimatorError> {
    history.check_param(theta)?;
    let cost = 0.5
        * history
            .blocks()
            .map(|(f, y)| {
                let r = linalg::sub(&f.tr_mat_vec(theta), y);
                linalg::dot(&r, &r)
            })
            .sum::<f64>();
    if let Some(theta_star) = theta_star {
        history.check_param(theta_star)?;
        let err = linalg::sub(theta, theta_star);
        let param_form = 0.5
            * history
                .blocks()
                .map(|(f, _)| {
                    let r = f.tr_mat_vec(&err);
                    linalg::dot(&r, &r)
                })
                .sum::<f64>();
        if (cost - param_form).abs() > 1e-10 * (1.0 + cost.abs()) {
            return Err(EstimatorError::InconsistentHistory(format!(
                "residual form {cost:e} vs parameter form {param_form:e}"
            )));
        }
    }
    Ok(cost)
}

/// Proximal cost `g(θ) = h(θ) + (ε/2)‖θ - θ_prev‖²`.
pub fn online_cost_g(
    history: &RegressionHistory,
    theta: &[f64],
    theta_prev: &[f64],
    epsilon: f64,
) -> Result<f64, EstimatorError> {
    if theta.len() != theta_prev.len() {
        return Err(EstimatorError::DimensionMismatch(
            "theta and theta_prev differ in length".into(),
        ));
    }
    let h = online_cost_h(history, theta, None)?;
    let d = linalg::sub(theta, theta_prev);
    Ok(h + 0.5 * epsilon * linalg::dot(&d, &d))
}

/// Discounted cost minimized by RLSFF after `k = history.len()` observations:
/// `½ Σ λ^{2(k-1-i)} ‖F_iᵀθ - y_i‖² + (λ^{2k} ε / 2)‖θ - θ_0‖²`.
pub fn online_cost_gf(
    history: &RegressionHistory,
    theta: &[f64],
    theta0: &[f64],
    epsilon: f64,
    lambda_sq: f64,
) -> Result<f64, EstimatorError> {
    history.check_param(theta)?;
    if theta.len() != theta0.len() {
        return Err(EstimatorError::DimensionMismatch(
            "theta and theta0 differ in length".into(),
        ));
    }
    let k = history.len();
    let data: f64 = history
        .blocks()
        .enumerate()
        .map(|(i, (f, y))| {
            let r = linalg::sub(&f.tr_mat_vec(theta), y);
            lambda_sq.powi((k - 1 - i) as i32) * linalg::dot(&r, &r)
        })
        .sum();
    let d = linalg::sub(theta, theta0);
    Ok(0.5 * data + 0.5 * lambda_sq.powi(k as i32) * epsilon * linalg::dot(&d, &d))
}
