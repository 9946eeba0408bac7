//! Model reference adaptive control recast as a matched-uncertainty system.
//!
//! The plant `x_{k+1} = A x_k + B(u_k - ψ(x_k)ᵀ θ*)` tracks the reference
//! `x̄_{k+1} = A_r x̄_k + B_r r_k` under `u_k = -K1 x_k + K2 r_k + ψ(x_k)ᵀ θ_k`.
//! With `A - B K1 = A_r` and `B K2 = B_r`, the error `e_k = x_k - x̄_k` obeys
//! `e_{k+1} = A_r e_k + B φ_k(e_k)ᵀ (θ_k - θ*)` with `φ_k(e) = ψ(e + x̄_k)`.

use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use super::{spectral_radius, DynamicsError, FeatureMap, Plant, SystemModel};
use crate::linalg::{self, spd_solve, spectral_norm, sym_eig_extrema, Matrix};

/// Residuals above this are reported as a matching warning.
pub const MATCHING_TOL: f64 = 1e-8;

const RANK_TOL: f64 = 1e-12;

/// `amplitude * sin(frequency * k + phase)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineTerm {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

/// Reference command `r_k`. The scalar signal is applied to every input channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ReferenceInput {
    Zero,
    MultiSine { terms: Vec<SineTerm> },
}

impl ReferenceInput {
    /// `sin(0.1 k) + 0.5 sin(0.3 k + 1)`.
    pub fn default_multisine() -> Self {
        ReferenceInput::MultiSine {
            terms: vec![
                SineTerm {
                    amplitude: 1.0,
                    frequency: 0.1,
                    phase: 0.0,
                },
                SineTerm {
                    amplitude: 0.5,
                    frequency: 0.3,
                    phase: 1.0,
                },
            ],
        }
    }

    pub fn value(&self, k: usize, m: usize) -> Vec<f64> {
        let scalar = match self {
            ReferenceInput::Zero => 0.0,
            ReferenceInput::MultiSine { terms } => terms
                .iter()
                .map(|t| t.amplitude * (t.frequency * k as f64 + t.phase).sin())
                .sum(),
        };
        vec![scalar; m]
    }
}

impl Default for ReferenceInput {
    fn default() -> Self {
        Self::default_multisine()
    }
}

/// Reference trajectory `x̄_k`, extended on demand and cached.
#[derive(Debug)]
struct ReferenceTrajectory {
    a_r: Matrix,
    b_r: Matrix,
    input: ReferenceInput,
    states: RwLock<Vec<Vec<f64>>>,
}

impl ReferenceTrajectory {
    fn new(a_r: Matrix, b_r: Matrix, input: ReferenceInput, x_bar0: Vec<f64>, capacity: usize) -> Self {
        let traj = Self {
            a_r,
            b_r,
            input,
            states: RwLock::new(vec![x_bar0]),
        };
        traj.state(capacity);
        traj
    }

    fn state(&self, k: usize) -> Vec<f64> {
        if let Some(x) = self.states.read().expect("reference cache poisoned").get(k) {
            return x.clone();
        }
        let mut states = self.states.write().expect("reference cache poisoned");
        while states.len() <= k {
            let j = states.len() - 1;
            let r = self.input.value(j, self.b_r.cols());
            let next = linalg::add(&self.a_r.mat_vec(&states[j]), &self.b_r.mat_vec(&r));
            states.push(next);
        }
        states[k].clone()
    }
}

/// Error dynamics `e_{k+1} = A_r e_k + B(u_k - φ_k(e_k)ᵀ θ*)` with `φ_k(e) = ψ(e + x̄_k)`.
#[derive(Debug)]
pub struct MracErrorPlant {
    a_r: Matrix,
    b: Matrix,
    psi: FeatureMap,
    reference: ReferenceTrajectory,
}

impl Plant for MracErrorPlant {
    fn state_dim(&self) -> usize {
        self.a_r.rows()
    }
    fn input_dim(&self) -> usize {
        self.b.cols()
    }
    fn param_dim(&self) -> usize {
        self.psi.shape(self.a_r.rows()).0
    }
    fn nominal(&self, _k: usize, e: &[f64]) -> Vec<f64> {
        self.a_r.mat_vec(e)
    }
    fn input_matrix(&self, _k: usize, _e: &[f64]) -> Matrix {
        self.b.clone()
    }
    fn features(&self, k: usize, e: &[f64]) -> Matrix {
        self.psi.eval(&linalg::add(e, &self.reference.state(k)))
    }
    fn linear_nominal(&self) -> Option<&Matrix> {
        Some(&self.a_r)
    }
    fn reference_state(&self, k: usize) -> Option<Vec<f64>> {
        Some(self.reference.state(k))
    }
}

/// Inputs for [`build_mrac_error_system`].
#[derive(Clone, Debug)]
pub struct MracSpec {
    pub a: Matrix,
    pub b: Matrix,
    pub a_r: Matrix,
    pub b_r: Matrix,
    pub psi: FeatureMap,
    pub theta_star: Vec<f64>,
    pub reference: ReferenceInput,
    pub x_bar0: Vec<f64>,
    /// Supplied `(K1, K2)` skip the least-squares solve.
    pub gains: Option<(Matrix, Matrix)>,
    /// Reference steps precomputed up front.
    pub reference_capacity: usize,
}

#[derive(Clone, Debug)]
pub struct MracErrorSystem {
    pub model: SystemModel,
    pub k1: Matrix,
    pub k2: Matrix,
    /// `max(‖A - B K1 - A_r‖, ‖B K2 - B_r‖)`.
    pub matching_residual: f64,
    /// Set when the residual exceeds [`MATCHING_TOL`]; the system is still returned.
    pub matching_warning: Option<String>,
    pub spectral_radius: f64,
}

/// Least-squares solution of `B X = R` via the normal equations.
fn least_squares(b: &Matrix, btb: &Matrix, rhs: &Matrix) -> Result<Matrix, DynamicsError> {
    let m = b.cols();
    let bt_rhs = b.transpose().matmul(rhs);
    let mut out = Matrix::zeros(m, rhs.cols());
    for j in 0..rhs.cols() {
        let col: Vec<f64> = (0..m).map(|i| bt_rhs[(i, j)]).collect();
        let x = spd_solve(btb, &col)?;
        for i in 0..m {
            out[(i, j)] = x[i];
        }
    }
    Ok(out)
}

pub fn build_mrac_error_system(spec: &MracSpec) -> Result<MracErrorSystem, DynamicsError> {
    let n = spec.a.rows();
    let m = spec.b.cols();
    let square_n = |x: &Matrix| x.shape() == (n, n);
    if !square_n(&spec.a) || !square_n(&spec.a_r) || spec.b.rows() != n || spec.b_r.shape() != (n, m) {
        return Err(DynamicsError::DimensionMismatch(format!(
            "A {:?}, B {:?}, A_r {:?}, B_r {:?}",
            spec.a.shape(),
            spec.b.shape(),
            spec.a_r.shape(),
            spec.b_r.shape()
        )));
    }
    if spec.x_bar0.len() != n {
        return Err(DynamicsError::DimensionMismatch(format!(
            "reference initial state has length {}, expected {n}",
            spec.x_bar0.len()
        )));
    }
    let (p, psi_m) = spec.psi.shape(n);
    if psi_m != m || spec.theta_star.len() != p {
        return Err(DynamicsError::DimensionMismatch(format!(
            "ψ is {p}x{psi_m}, θ* has length {}, B has {m} columns",
            spec.theta_star.len()
        )));
    }

    let mut btb = spec.b.transpose().matmul(&spec.b);
    btb.symmetrize();
    let (lo, hi) = sym_eig_extrema(&btb)?;
    if m == 0 || !(lo > RANK_TOL * hi.max(f64::MIN_POSITIVE)) {
        return Err(DynamicsError::NotFullColumnRank);
    }

    let radius = spectral_radius(&spec.a_r)?;
    if radius >= 1.0 {
        return Err(DynamicsError::UnstableReference {
            spectral_radius: radius,
        });
    }

    let (k1, k2) = match &spec.gains {
        Some((k1, k2)) => {
            if k1.shape() != (m, n) || k2.shape() != (m, m) {
                return Err(DynamicsError::DimensionMismatch(format!(
                    "K1 {:?}, K2 {:?}; expected ({m}, {n}) and ({m}, {m})",
                    k1.shape(),
                    k2.shape()
                )));
            }
            (k1.clone(), k2.clone())
        }
        None => (
            least_squares(&spec.b, &btb, &spec.a.sub(&spec.a_r))?,
            least_squares(&spec.b, &btb, &spec.b_r)?,
        ),
    };
    let matching_residual = spectral_norm(&spec.a.sub(&spec.b.matmul(&k1)).sub(&spec.a_r))
        .max(spectral_norm(&spec.b.matmul(&k2).sub(&spec.b_r)));
    let matching_warning = (matching_residual > MATCHING_TOL).then(|| {
        format!(
            "reference model is not exactly matchable: residual {matching_residual:e}; \
             error dynamics use A_r directly"
        )
    });

    let plant = MracErrorPlant {
        a_r: spec.a_r.clone(),
        b: spec.b.clone(),
        psi: spec.psi.clone(),
        reference: ReferenceTrajectory::new(
            spec.a_r.clone(),
            spec.b_r.clone(),
            spec.reference.clone(),
            spec.x_bar0.clone(),
            spec.reference_capacity,
        ),
    };
    let model = SystemModel::new(Arc::new(plant), spec.theta_star.clone())?;
    Ok(MracErrorSystem {
        model,
        k1,
        k2,
        matching_residual,
        matching_warning,
        spectral_radius: radius,
    })
}
