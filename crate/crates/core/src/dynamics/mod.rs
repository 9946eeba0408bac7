//! Matched-uncertainty systems `x_{k+1} = f_k(x_k) + B_k(x_k)(u_k - φ_k(x_k)ᵀ θ*)`.
//!
//! A [`SystemModel`] pairs a [`Plant`] (the known maps `f`, `B`, `φ`) with the
//! unknown parameter `θ*`. The parameter never leaves the model through the
//! controller path: closed-loop rollouts hand estimators only `(φ_k, B_k, y_k)`
//! after the step has been taken.

mod ediss;
mod mrac;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::{EstimatorError, ParameterEstimator};
use crate::linalg::{self, LinalgError, Matrix};

pub use ediss::{fit_ediss_linear, spectral_radius, verify_ediss, EdissCertificate, EdissReport};
pub use mrac::{build_mrac_error_system, MracErrorPlant, MracErrorSystem, MracSpec, ReferenceInput, SineTerm};

/// Tolerance on the innovation identity `y_k = B_k φ_kᵀ θ*`, relative to the
/// magnitude of the terms that produced it.
pub const INNOVATION_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },
    #[error("innovation deviates from B φᵀ θ* by {deviation:e} at step {step}")]
    InconsistentInnovation { step: usize, deviation: f64 },
    #[error("input matrix is not full column rank")]
    NotFullColumnRank,
    #[error("reference dynamics are not Schur stable (spectral radius {spectral_radius})")]
    UnstableReference { spectral_radius: f64 },
    #[error("invalid certificate or argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RolloutError {
    #[error("step {step}: {source}")]
    Dynamics { step: usize, source: DynamicsError },
    #[error("step {step}: estimator update failed: {source}")]
    Estimator { step: usize, source: EstimatorError },
}

/// Known part of a matched-uncertainty system.
pub trait Plant: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn param_dim(&self) -> usize;

    /// Nominal map `f_k(x)`, with `f_k(0) = 0`.
    fn nominal(&self, k: usize, x: &[f64]) -> Vec<f64>;

    /// Input matrix `B_k(x)`, n x m.
    fn input_matrix(&self, k: usize, x: &[f64]) -> Matrix;

    /// Feature matrix `φ_k(x)`, p x m.
    fn features(&self, k: usize, x: &[f64]) -> Matrix;

    /// `Some(A)` when the nominal map is `f_k(x) = A x` for all `k`.
    fn linear_nominal(&self) -> Option<&Matrix> {
        None
    }

    /// Tracked reference state, for plants that encode a tracking error.
    fn reference_state(&self, _k: usize) -> Option<Vec<f64>> {
        None
    }
}

pub type FeatureFn = Arc<dyn Fn(&[f64]) -> Matrix + Send + Sync>;

/// Selector for the feature matrix `φ(x)`.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureMap {
    /// `φ(x) = x` as an n x 1 matrix (p = n, m = 1).
    State,
    /// State-independent features.
    Constant { phi: Matrix },
    #[serde(skip)]
    Custom {
        param_dim: usize,
        input_dim: usize,
        map: FeatureFn,
    },
}

impl FeatureMap {
    pub fn eval(&self, x: &[f64]) -> Matrix {
        match self {
            FeatureMap::State => Matrix::column(x),
            FeatureMap::Constant { phi } => phi.clone(),
            FeatureMap::Custom { map, .. } => map(x),
        }
    }

    /// `(p, m)` for a state of dimension `n`.
    pub fn shape(&self, n: usize) -> (usize, usize) {
        match self {
            FeatureMap::State => (n, 1),
            FeatureMap::Constant { phi } => phi.shape(),
            FeatureMap::Custom {
                param_dim, input_dim, ..
            } => (*param_dim, *input_dim),
        }
    }
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureMap::State => write!(f, "State"),
            FeatureMap::Constant { phi } => f.debug_struct("Constant").field("phi", phi).finish(),
            FeatureMap::Custom {
                param_dim, input_dim, ..
            } => write!(f, "Custom({param_dim}x{input_dim})"),
        }
    }
}

impl PartialEq for FeatureMap {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (FeatureMap::State, FeatureMap::State) => true,
            (FeatureMap::Constant { phi: a }, FeatureMap::Constant { phi: b }) => a == b,
            (FeatureMap::Custom { map: a, .. }, FeatureMap::Custom { map: b, .. }) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

/// Time-invariant linear plant: `f(x) = A x`, constant `B`, features from a [`FeatureMap`].
#[derive(Clone, Debug)]
pub struct LinearPlant {
    a: Matrix,
    b: Matrix,
    features: FeatureMap,
}

impl LinearPlant {
    pub fn new(a: Matrix, b: Matrix, features: FeatureMap) -> Result<Self, DynamicsError> {
        if !a.is_square() || b.rows() != a.rows() {
            return Err(DynamicsError::DimensionMismatch(format!(
                "A is {}x{}, B is {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        let (_, m) = features.shape(a.rows());
        if m != b.cols() {
            return Err(DynamicsError::DimensionMismatch(format!(
                "features have {m} columns but B has {}",
                b.cols()
            )));
        }
        Ok(Self { a, b, features })
    }
}

impl Plant for LinearPlant {
    fn state_dim(&self) -> usize {
        self.a.rows()
    }
    fn input_dim(&self) -> usize {
        self.b.cols()
    }
    fn param_dim(&self) -> usize {
        self.features.shape(self.a.rows()).0
    }
    fn nominal(&self, _k: usize, x: &[f64]) -> Vec<f64> {
        self.a.mat_vec(x)
    }
    fn input_matrix(&self, _k: usize, _x: &[f64]) -> Matrix {
        self.b.clone()
    }
    fn features(&self, _k: usize, x: &[f64]) -> Matrix {
        self.features.eval(x)
    }
    fn linear_nominal(&self) -> Option<&Matrix> {
        Some(&self.a)
    }
}

type NominalFn = dyn Fn(usize, &[f64]) -> Vec<f64> + Send + Sync;
type MatrixFn = dyn Fn(usize, &[f64]) -> Matrix + Send + Sync;

/// Plant assembled from closures, for nonlinear or time-varying systems.
#[derive(Clone)]
pub struct FnPlant {
    pub state_dim: usize,
    pub input_dim: usize,
    pub param_dim: usize,
    pub nominal: Arc<NominalFn>,
    pub input_matrix: Arc<MatrixFn>,
    pub features: Arc<MatrixFn>,
}

impl Plant for FnPlant {
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn param_dim(&self) -> usize {
        self.param_dim
    }
    fn nominal(&self, k: usize, x: &[f64]) -> Vec<f64> {
        (self.nominal)(k, x)
    }
    fn input_matrix(&self, k: usize, x: &[f64]) -> Matrix {
        (self.input_matrix)(k, x)
    }
    fn features(&self, k: usize, x: &[f64]) -> Matrix {
        (self.features)(k, x)
    }
}

/// One closed-loop transition.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub input: Vec<f64>,
    pub innovation: Vec<f64>,
    pub features: Matrix,
    pub input_matrix: Matrix,
}

/// A plant together with its unknown parameter `θ*`.
#[derive(Clone)]
pub struct SystemModel {
    plant: Arc<dyn Plant>,
    true_param: Vec<f64>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("state_dim", &self.state_dim())
            .field("input_dim", &self.input_dim())
            .field("param_dim", &self.param_dim())
            .finish_non_exhaustive()
    }
}

impl SystemModel {
    pub fn new(plant: Arc<dyn Plant>, true_param: Vec<f64>) -> Result<Self, DynamicsError> {
        if true_param.len() != plant.param_dim() {
            return Err(DynamicsError::DimensionMismatch(format!(
                "θ* has length {} but the plant has {} parameters",
                true_param.len(),
                plant.param_dim()
            )));
        }
        if true_param.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::InvalidArgument("θ* must be finite".into()));
        }
        Ok(Self { plant, true_param })
    }

    pub fn state_dim(&self) -> usize {
        self.plant.state_dim()
    }
    pub fn input_dim(&self) -> usize {
        self.plant.input_dim()
    }
    pub fn param_dim(&self) -> usize {
        self.plant.param_dim()
    }
    pub fn plant(&self) -> &dyn Plant {
        self.plant.as_ref()
    }

    /// `θ - θ*`. For evaluating a finished run; controllers never call this.
    pub fn parameter_error(&self, theta: &[f64]) -> Vec<f64> {
        linalg::sub(theta, &self.true_param)
    }

    /// Deliberate read access to `θ*` for evaluation code (bounds, reports).
    pub fn reveal_true_param(&self) -> &[f64] {
        &self.true_param
    }

    fn check_state(&self, x: &[f64]) -> Result<(), DynamicsError> {
        if x.len() != self.state_dim() {
            return Err(DynamicsError::DimensionMismatch(format!(
                "state has length {}, expected {}",
                x.len(),
                self.state_dim()
            )));
        }
        Ok(())
    }

    fn check_maps(&self, b: &Matrix, phi: &Matrix, fx: &[f64]) -> Result<(), DynamicsError> {
        let (n, m, p) = (self.state_dim(), self.input_dim(), self.param_dim());
        if b.shape() != (n, m) || phi.shape() != (p, m) || fx.len() != n {
            return Err(DynamicsError::DimensionMismatch(format!(
                "maps returned B {:?}, φ {:?}, f of length {}; expected B ({n}, {m}), φ ({p}, {m}), f of length {n}",
                b.shape(),
                phi.shape(),
                fx.len()
            )));
        }
        Ok(())
    }

    /// Applies `u = φ_k(x)ᵀ θ` and returns the successor state with the innovation
    /// `y = -x_next + f_k(x) + B φᵀ θ`, checked against `B φᵀ θ*`.
    pub fn closed_loop_step(&self, k: usize, x: &[f64], theta: &[f64]) -> Result<StepOutcome, DynamicsError> {
        self.check_state(x)?;
        if theta.len() != self.param_dim() {
            return Err(DynamicsError::DimensionMismatch(format!(
                "estimate has length {}, expected {}",
                theta.len(),
                self.param_dim()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::InvalidArgument(format!(
                "non-finite estimate at step {k}"
            )));
        }
        let fx = self.plant.nominal(k, x);
        let b = self.plant.input_matrix(k, x);
        let phi = self.plant.features(k, x);
        self.check_maps(&b, &phi, &fx)?;

        let input = phi.tr_mat_vec(theta);
        let applied = b.mat_vec(&input);
        let uncertainty = b.mat_vec(&phi.tr_mat_vec(&self.true_param));
        let disturbance = b.mat_vec(&phi.tr_mat_vec(&linalg::sub(theta, &self.true_param)));
        let next_state = linalg::add(&fx, &disturbance);
        if next_state.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFiniteState { step: k + 1 });
        }
        let innovation = linalg::add(&linalg::sub(&fx, &next_state), &applied);
        let deviation = linalg::norm(&linalg::sub(&innovation, &uncertainty));
        let scale = 1.0 + linalg::norm(&fx) + linalg::norm(&applied) + linalg::norm(&uncertainty);
        if deviation > INNOVATION_TOL * scale {
            return Err(DynamicsError::InconsistentInnovation { step: k, deviation });
        }
        Ok(StepOutcome {
            next_state,
            input,
            innovation,
            features: phi,
            input_matrix: b,
        })
    }

    /// Closed loop under `u_k = φ_kᵀ θ_k` for `horizon` steps.
    ///
    /// At each step the estimate is read first, the system advances, and only
    /// then is the estimator fed `(φ_k, B_k, y_k)`.
    pub fn rollout_closed_loop<E: ParameterEstimator>(
        &self,
        estimator: &mut E,
        x0: &[f64],
        horizon: usize,
    ) -> Result<Trajectory, RolloutError> {
        self.check_state(x0)
            .map_err(|source| RolloutError::Dynamics { step: 0, source })?;
        let mut traj = Trajectory::with_capacity(x0, horizon, true);
        let mut x = x0.to_vec();
        for k in 0..horizon {
            let theta = estimator.estimate().to_vec();
            let out = self
                .closed_loop_step(k, &x, &theta)
                .map_err(|source| RolloutError::Dynamics { step: k, source })?;
            estimator
                .observe(&out.features, &out.input_matrix, &out.innovation)
                .map_err(|source| RolloutError::Estimator { step: k, source })?;
            traj.regressors.push(out.features.matmul(&out.input_matrix.transpose()));
            traj.estimates
                .as_mut()
                .expect("closed loop stores estimates")
                .push(theta);
            traj.inputs.push(out.input);
            traj.innovations.push(out.innovation);
            x = out.next_state;
            traj.states.push(x.clone());
        }
        Ok(traj)
    }

    /// Counterfactual benchmark `x*_{k+1} = f_k(x*_k)` under `u*_k = φ_k(x*_k)ᵀ θ*`.
    pub fn rollout_benchmark(&self, x0: &[f64], horizon: usize) -> Result<Trajectory, RolloutError> {
        self.check_state(x0)
            .map_err(|source| RolloutError::Dynamics { step: 0, source })?;
        let mut traj = Trajectory::with_capacity(x0, horizon, false);
        let mut x = x0.to_vec();
        for k in 0..horizon {
            let fx = self.plant.nominal(k, &x);
            let b = self.plant.input_matrix(k, &x);
            let phi = self.plant.features(k, &x);
            self.check_maps(&b, &phi, &fx)
                .map_err(|source| RolloutError::Dynamics { step: k, source })?;
            if fx.iter().any(|v| !v.is_finite()) {
                return Err(RolloutError::Dynamics {
                    step: k,
                    source: DynamicsError::NonFiniteState { step: k + 1 },
                });
            }
            let input = phi.tr_mat_vec(&self.true_param);
            traj.innovations.push(b.mat_vec(&input));
            traj.regressors.push(phi.matmul(&b.transpose()));
            traj.inputs.push(input);
            x = fx;
            traj.states.push(x.clone());
        }
        Ok(traj)
    }

    /// Largest deviation when re-simulating `x_{k+1} = f_k(x_k) + B_k(u_k - φ_kᵀθ*)`
    /// from the stored states and inputs.
    pub fn replay_deviation(&self, traj: &Trajectory) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..traj.horizon() {
            let x = &traj.states[k];
            let b = self.plant.input_matrix(k, x);
            let phi = self.plant.features(k, x);
            let matched = linalg::sub(&traj.inputs[k], &phi.tr_mat_vec(&self.true_param));
            let next = linalg::add(&self.plant.nominal(k, x), &b.mat_vec(&matched));
            worst = worst.max(linalg::norm(&linalg::sub(&next, &traj.states[k + 1])));
        }
        worst
    }
}

/// States `x_0..x_T`, inputs, estimates and innovations of one rollout.
///
/// `regressors[k]` holds the realized block `F_k = φ_k B_kᵀ` (p x n).
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub estimates: Option<Vec<Vec<f64>>>,
    pub innovations: Vec<Vec<f64>>,
    pub regressors: Vec<Matrix>,
}

impl Trajectory {
    fn with_capacity(x0: &[f64], horizon: usize, closed_loop: bool) -> Self {
        let mut states = Vec::with_capacity(horizon + 1);
        states.push(x0.to_vec());
        Self {
            states,
            inputs: Vec::with_capacity(horizon),
            estimates: closed_loop.then(|| Vec::with_capacity(horizon)),
            innovations: Vec::with_capacity(horizon),
            regressors: Vec::with_capacity(horizon),
        }
    }

    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory holds x_0")
    }

    pub fn is_consistent(&self) -> bool {
        let t = self.horizon();
        self.states.len() == t + 1
            && self.innovations.len() == t
            && self.regressors.len() == t
            && self.estimates.as_ref().is_none_or(|e| e.len() == t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::RplState;

    fn scalar_model(theta_star: f64) -> SystemModel {
        let plant = LinearPlant::new(
            Matrix::scaled_identity(1, 0.5),
            Matrix::identity(1),
            FeatureMap::Constant {
                phi: Matrix::identity(1),
            },
        )
        .unwrap();
        SystemModel::new(Arc::new(plant), vec![theta_star]).unwrap()
    }

    #[test]
    fn scalar_step_example() {
        let model = scalar_model(1.0);
        let out = model.closed_loop_step(0, &[1.0], &[0.0]).unwrap();
        assert_eq!(out.next_state, vec![-0.5]);
        assert_eq!(out.input, vec![0.0]);
        assert_eq!(out.innovation, vec![1.0]);
    }

    #[test]
    fn exact_matching_step() {
        let model = scalar_model(0.8);
        let out = model.closed_loop_step(3, &[2.0], &[0.8]).unwrap();
        assert_eq!(out.next_state, vec![1.0]);
        assert!((out.innovation[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn scalar_rollouts() {
        let model = scalar_model(1.0);
        let bench = model.rollout_benchmark(&[1.0], 3).unwrap();
        assert_eq!(bench.states, vec![vec![1.0], vec![0.5], vec![0.25], vec![0.125]]);
        assert!(bench.estimates.is_none());

        let mut est = RplState::new(1.0, vec![0.0]).unwrap();
        let traj = model.rollout_closed_loop(&mut est, &[1.0], 3).unwrap();
        assert_eq!(traj.states[..3], [vec![1.0], vec![-0.5], vec![-0.75]]);
        let thetas: Vec<f64> = traj.estimates.as_ref().unwrap().iter().map(|t| t[0]).collect();
        assert!((thetas[1] - 0.5).abs() < 1e-15 && (thetas[2] - 5.0 / 6.0).abs() < 1e-15);
        assert!((est.theta()[0] - 23.0 / 24.0).abs() < 1e-15);
        assert!(traj.is_consistent());
        assert!(model.replay_deviation(&traj) < 1e-12);
    }

    #[test]
    fn zero_horizon() {
        let model = scalar_model(1.0);
        let mut est = RplState::new(1.0, vec![0.0]).unwrap();
        let traj = model.rollout_closed_loop(&mut est, &[0.3], 0).unwrap();
        assert_eq!(traj.states, vec![vec![0.3]]);
        assert_eq!(traj.horizon(), 0);
    }

    #[test]
    fn dimension_errors_carry_step() {
        let model = scalar_model(1.0);
        assert!(matches!(
            model.closed_loop_step(0, &[1.0, 2.0], &[0.0]),
            Err(DynamicsError::DimensionMismatch(_))
        ));
        let mut est = RplState::new(1.0, vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            model.rollout_closed_loop(&mut est, &[1.0], 2),
            Err(RolloutError::Dynamics { step: 0, .. })
        ));
    }

    #[test]
    fn non_finite_state_detected() {
        let plant = FnPlant {
            state_dim: 1,
            input_dim: 1,
            param_dim: 1,
            nominal: Arc::new(|_, x: &[f64]| vec![x[0] * 1e300]),
            input_matrix: Arc::new(|_, _: &[f64]| Matrix::identity(1)),
            features: Arc::new(|_, _: &[f64]| Matrix::identity(1)),
        };
        let model = SystemModel::new(Arc::new(plant), vec![1.0]).unwrap();
        let mut est = RplState::new(1.0, vec![1.0]).unwrap();
        let err = model.rollout_closed_loop(&mut est, &[1e10], 5).unwrap_err();
        assert!(matches!(
            err,
            RolloutError::Dynamics {
                step: 0,
                source: DynamicsError::NonFiniteState { step: 1 }
            }
        ));
    }

    #[test]
    fn theta_star_length_checked() {
        let plant = LinearPlant::new(Matrix::identity(2), Matrix::column(&[0.0, 1.0]), FeatureMap::State).unwrap();
        assert!(SystemModel::new(Arc::new(plant), vec![1.0]).is_err());
    }

    #[test]
    fn feature_map_serde() {
        let s = serde_json::to_string(&FeatureMap::State).unwrap();
        assert_eq!(s, r#"{"kind":"state"}"#);
        let c: FeatureMap = serde_json::from_str(r#"{"kind":"constant","phi":[[1.0]]}"#).unwrap();
        assert_eq!(c.shape(3), (1, 1));
    }
}
