//! Exponential incremental input-to-state stability certificates.
//!
//! A certificate `(c0, cw, ρ)` claims that for the nominal map `f`, any two
//! trajectories `x_{k+1} = f_k(x_k)` and `y_{k+1} = f_k(y_k) + w_k` satisfy
//! `‖x_k - y_k‖ ≤ c0 ρ^k ‖x_0 - y_0‖ + cw Σ_{i<k} ρ^{k-i-1} ‖w_i‖`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DynamicsError;
use crate::linalg::{self, spectral_norm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdissCertificate {
    pub c0: f64,
    pub cw: f64,
    pub rho: f64,
    /// Zero for certificates supplied by hand.
    #[serde(default)]
    pub fit_horizon: usize,
}

impl EdissCertificate {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.c0 >= 1.0 && self.cw > 0.0 && self.rho > 0.0 && self.rho < 1.0) {
            return Err(DynamicsError::InvalidArgument(format!(
                "certificate needs c0 >= 1, cw > 0, rho in (0,1); got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdissReport {
    pub passed: bool,
    pub trials: usize,
    pub horizon: usize,
    /// Smallest `bound - ‖x_k - y_k‖` seen; negative means a violation.
    pub worst_margin: f64,
    /// Step and trial where the worst margin occurred.
    pub worst_step: usize,
    pub worst_trial: usize,
}

/// Spectral radius of a real square matrix.
pub fn spectral_radius(a: &Matrix) -> Result<f64, DynamicsError> {
    if !a.is_square() {
        return Err(DynamicsError::DimensionMismatch(format!(
            "spectral radius of a {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    if a.rows() == 0 {
        return Ok(0.0);
    }
    let m = DMatrix::from_row_slice(a.rows(), a.cols(), a.as_slice());
    Ok(m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Constants for linear nominal dynamics `f(x) = A_r x`:
/// `ρ = sr + margin (1 - sr)`, `c0 = cw = max_{k ≤ K} ‖A_r^k‖ / ρ^k`.
pub fn fit_ediss_linear(a_r: &Matrix, rho_margin: f64, fit_horizon: usize) -> Result<EdissCertificate, DynamicsError> {
    if !(rho_margin > 0.0 && rho_margin <= 1.0) {
        return Err(DynamicsError::InvalidArgument(format!(
            "rho margin must lie in (0, 1], got {rho_margin}"
        )));
    }
    let sr = spectral_radius(a_r)?;
    if sr >= 1.0 {
        return Err(DynamicsError::UnstableReference { spectral_radius: sr });
    }
    let rho = (sr + rho_margin * (1.0 - sr)).min(1.0 - f64::EPSILON);
    let mut power = Matrix::identity(a_r.rows());
    let mut c0: f64 = 1.0;
    for k in 1..=fit_horizon {
        power = power.matmul(a_r);
        c0 = c0.max(spectral_norm(&power) / rho.powi(k as i32));
    }
    Ok(EdissCertificate {
        c0,
        cw: c0,
        rho,
        fit_horizon,
    })
}

/// Monte-Carlo check of a certificate on random initial pairs and bounded disturbances.
///
/// Initial states are drawn uniformly from `[-1, 1]^n`; each `w_k` has a random
/// direction and a norm uniform in `[0, perturbation_scale]`.
#[allow(clippy::too_many_arguments)]
pub fn verify_ediss<F>(
    nominal: F,
    state_dim: usize,
    cert: &EdissCertificate,
    trials: usize,
    perturbation_scale: f64,
    horizon: usize,
    seed: u64,
) -> EdissReport
where
    F: Fn(usize, &[f64]) -> Vec<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = EdissReport {
        passed: true,
        trials,
        horizon,
        worst_margin: f64::INFINITY,
        worst_step: 0,
        worst_trial: 0,
    };
    let tol = 1e-12;
    for trial in 0..trials {
        let mut x: Vec<f64> = (0..state_dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let mut y: Vec<f64> = (0..state_dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let initial_gap = linalg::norm(&linalg::sub(&x, &y));
        // running Σ ρ^{k-i-1} ‖w_i‖
        let mut disturbance_sum = 0.0;
        for k in 1..=horizon {
            let mut w: Vec<f64> = (0..state_dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let wn = linalg::norm(&w);
            let target = rng.gen_range(0.0..=perturbation_scale);
            if wn > 0.0 {
                w.iter_mut().for_each(|v| *v *= target / wn);
            }
            x = nominal(k - 1, &x);
            y = linalg::add(&nominal(k - 1, &y), &w);
            disturbance_sum = cert.rho * disturbance_sum + linalg::norm(&w);
            let bound = cert.c0 * cert.rho.powi(k as i32) * initial_gap + cert.cw * disturbance_sum;
            let gap = linalg::norm(&linalg::sub(&x, &y));
            let margin = bound - gap;
            if margin < report.worst_margin {
                report.worst_margin = margin;
                report.worst_step = k;
                report.worst_trial = trial;
            }
            if margin < -tol * (1.0 + bound) {
                report.passed = false;
            }
        }
    }
    report
}
