//! Paired closed-loop and benchmark experiments, empirical regret and the
//! finite-regret bounds it is certified against.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    fit_ediss_linear, verify_ediss, DynamicsError, EdissCertificate, EdissReport, RolloutError, SystemModel, Trajectory,
};
use crate::estimators::{EstimatorConfig, EstimatorError, ParameterEstimator};
use crate::excitation::{
    rlsff_constant, rpl_constants, ContractionConstants, DeltaSetting, ExcitationError, ExcitationReport,
};
use crate::linalg::{self, spectral_norm};

/// Safety factor applied to the witnessed state radius.
pub const RADIUS_SAFETY: f64 = 1.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CostKind {
    /// `c(x) = ‖x‖²`.
    #[default]
    Quadratic,
}

impl CostKind {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            CostKind::Quadratic => quadratic_cost(x),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CostKind::Quadratic => "quadratic",
        }
    }
}

pub fn quadratic_cost(x: &[f64]) -> f64 {
    linalg::dot(x, x)
}

/// Lipschitz constant of `cost` on the ball of radius `radius`.
pub fn lipschitz_estimate(cost: CostKind, radius: f64) -> f64 {
    match cost {
        CostKind::Quadratic => 2.0 * radius,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretTrace {
    /// `c(x_k) - c(x*_k)` for `k = 0..T-1`.
    pub per_step: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub radius: f64,
    pub lipschitz: f64,
    pub cost: CostKind,
}

impl RegretTrace {
    pub fn from_trajectories(closed: &Trajectory, benchmark: &Trajectory, cost: CostKind) -> Self {
        let t = closed.horizon().min(benchmark.horizon());
        let per_step: Vec<f64> = (0..t)
            .map(|k| cost.eval(&closed.states[k]) - cost.eval(&benchmark.states[k]))
            .collect();
        let mut total = 0.0;
        let cumulative = per_step
            .iter()
            .map(|r| {
                total += r;
                total
            })
            .collect();
        let radius = RADIUS_SAFETY
            * closed
                .states
                .iter()
                .chain(&benchmark.states)
                .map(|x| linalg::norm(x))
                .fold(0.0, f64::max);
        Self {
            per_step,
            cumulative,
            radius,
            lipschitz: lipschitz_estimate(cost, radius),
            cost,
        }
    }

    /// `R_T`; zero for an empty horizon.
    pub fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// `R_t` for `t` steps (`R_0 = 0`).
    pub fn at(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.cumulative[t - 1]
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundError {
    #[error("invalid constants: {0}")]
    InvalidConstants(String),
    #[error("ε = {epsilon} is not below ε_max = {epsilon_max:?}; the lifted bound needs γ")]
    MissingGamma { epsilon: f64, epsilon_max: Option<f64> },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub c0: f64,
    pub cw: f64,
    pub rho: f64,
    /// `sup_k ‖B_k φ_kᵀ‖` along the run.
    pub b: f64,
    pub lipschitz: f64,
    pub theta_err0: f64,
    pub ts: usize,
    pub constants: ContractionConstants,
    /// `None` evaluates the `T → ∞` variant with `ρ^T = 0`.
    pub horizon: Option<usize>,
    /// `λ = sqrt(λ²)` for the forgetting-factor bound.
    pub lambda: Option<f64>,
}

impl BoundInputs {
    fn check(&self) -> Result<(), BoundError> {
        let positive = [self.cw, self.b, self.lipschitz, self.theta_err0];
        if positive.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(BoundError::InvalidConstants(format!(
                "cw, b, L_c and ‖θ̃_0‖ must be finite and nonnegative: {positive:?}"
            )));
        }
        in_unit_interval("ρ", self.rho)
    }

    fn rho_t(&self) -> f64 {
        self.horizon.map_or(0.0, |t| self.rho.powf(t as f64))
    }

    fn transient(&self) -> f64 {
        self.ts as f64 / (1.0 - self.rho)
    }

    /// `(ρ^T + (1-a)ρ + a) / ((1-ρ)²(1-a))`.
    fn tail(&self, a: f64) -> f64 {
        let one_minus_rho = 1.0 - self.rho;
        (self.rho_t() + (1.0 - a) * self.rho + a) / (one_minus_rho * one_minus_rho * (1.0 - a))
    }
}

fn in_unit_interval(name: &str, v: f64) -> Result<(), BoundError> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(BoundError::InvalidConstants(format!("{name} = {v} must lie in (0, 1)")))
    }
}

/// `cw b L_c ‖θ̃_0‖ (T_s/(1-ρ) + (ρ^T + (1-η)ρ + η)/((1-ρ)²(1-η)))`.
pub fn bound_rpl_basic(inputs: &BoundInputs) -> Result<f64, BoundError> {
    inputs.check()?;
    let eta = inputs.constants.eta;
    in_unit_interval("η", eta)?;
    Ok(inputs.cw * inputs.b * inputs.lipschitz * inputs.theta_err0 * (inputs.transient() + inputs.tail(eta)))
}

/// The same form with `b` replaced by `c_p` and `η` by `γ`.
pub fn bound_rpl_lifted(inputs: &BoundInputs, epsilon: f64) -> Result<f64, BoundError> {
    inputs.check()?;
    let gamma = inputs.constants.gamma.ok_or(BoundError::MissingGamma {
        epsilon,
        epsilon_max: inputs.constants.epsilon_max,
    })?;
    in_unit_interval("γ", gamma)?;
    let c_p = inputs
        .constants
        .c_p
        .ok_or_else(|| BoundError::InvalidConstants("c_p missing".into()))?;
    Ok(inputs.cw * c_p * inputs.lipschitz * inputs.theta_err0 * (inputs.transient() + inputs.tail(gamma)))
}

/// `cw b L_c ‖θ̃_0‖ (T_s/(1-ρ) + c_r(ρ^T + 1)/((1-ρ)²(1-λ)))`.
pub fn bound_rlsff(inputs: &BoundInputs) -> Result<f64, BoundError> {
    inputs.check()?;
    let c_r = inputs
        .constants
        .c_r
        .ok_or_else(|| BoundError::InvalidConstants("c_r missing".into()))?;
    let lambda = inputs
        .lambda
        .ok_or_else(|| BoundError::InvalidConstants("λ missing".into()))?;
    in_unit_interval("λ", lambda)?;
    let one_minus_rho = 1.0 - inputs.rho;
    let tail = c_r * (inputs.rho_t() + 1.0) / (one_minus_rho * one_minus_rho * (1.0 - lambda));
    Ok(inputs.cw * inputs.b * inputs.lipschitz * inputs.theta_err0 * (inputs.transient() + tail))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certification {
    pub passed: bool,
    pub regret: f64,
    pub bound: f64,
    /// `bound / R_T`, or `f64::MAX` when `R_T ≤ 0`.
    pub slack_ratio: f64,
}

pub fn certify(trace: &RegretTrace, bound: f64) -> Certification {
    let regret = trace.total();
    Certification {
        passed: regret <= bound,
        regret,
        bound,
        slack_ratio: if regret > 0.0 { bound / regret } else { f64::MAX },
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Excitation(#[from] ExcitationError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Bound(#[from] BoundError),
}

/// Everything needed to run one paired experiment.
#[derive(Clone, Debug)]
pub struct ExperimentSpec<'a> {
    pub model: &'a SystemModel,
    pub estimator: &'a EstimatorConfig,
    pub x0: &'a [f64],
    pub horizon: usize,
    pub cost: CostKind,
    pub delta: DeltaSetting,
    pub ts_hint: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Experiment {
    pub closed: Trajectory,
    pub benchmark: Trajectory,
    pub trace: RegretTrace,
    pub excitation: ExcitationReport,
    /// `‖θ_k - θ*‖` for `k = 0..=T`; the last entry is the estimate after the final update.
    pub theta_error: Vec<f64>,
    pub final_estimate: Vec<f64>,
}

impl Experiment {
    pub fn theta_err0(&self) -> f64 {
        self.theta_error[0]
    }

    /// `sup_k ‖B_k φ_kᵀ‖` over the closed-loop run.
    pub fn b_witness(&self) -> f64 {
        self.closed.regressors.iter().map(spectral_norm).fold(0.0, f64::max)
    }
}

pub fn run_experiment(spec: &ExperimentSpec<'_>) -> Result<Experiment, ExperimentError> {
    let model = spec.model;
    if spec.estimator.theta0().len() != model.param_dim() {
        return Err(DynamicsError::DimensionMismatch(format!(
            "θ_0 has length {}, the model has {} parameters",
            spec.estimator.theta0().len(),
            model.param_dim()
        ))
        .into());
    }
    let mut estimator = spec.estimator.build()?;
    let closed = model.rollout_closed_loop(&mut estimator, spec.x0, spec.horizon)?;
    let benchmark = model.rollout_benchmark(spec.x0, spec.horizon)?;
    let trace = RegretTrace::from_trajectories(&closed, &benchmark, spec.cost);
    let excitation = ExcitationReport::analyze(&closed.regressors, spec.delta, spec.ts_hint)?;
    let final_estimate = estimator.estimate().to_vec();
    let theta_error = closed
        .estimates
        .iter()
        .flatten()
        .chain(std::iter::once(&final_estimate))
        .map(|th| linalg::norm(&model.parameter_error(th)))
        .collect();
    Ok(Experiment {
        closed,
        benchmark,
        trace,
        excitation,
        theta_error,
        final_estimate,
    })
}

/// How the incremental stability certificate is obtained and checked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdissSettings {
    pub rho_margin: f64,
    pub fit_horizon: usize,
    pub verify_trials: usize,
    pub verify_horizon: usize,
    pub perturbation_scale: f64,
    pub seed: u64,
    /// Required when the nominal dynamics are not linear.
    pub certificate: Option<EdissCertificate>,
}

impl Default for EdissSettings {
    fn default() -> Self {
        Self {
            rho_margin: 0.5,
            fit_horizon: 1000,
            verify_trials: 1000,
            verify_horizon: 200,
            perturbation_scale: 1.0,
            seed: 0,
            certificate: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundAssessment {
    pub certificate: Option<EdissCertificate>,
    pub ediss_check: Option<EdissReport>,
    pub inputs: Option<BoundInputs>,
    pub rpl_basic: Option<f64>,
    pub rpl_lifted: Option<f64>,
    pub rlsff: Option<f64>,
    /// The bound used for certification: the smaller valid one.
    pub bound: Option<f64>,
    /// The same bound with `ρ^T` dropped.
    pub bound_asymptotic: Option<f64>,
    pub certification: Option<Certification>,
    /// Why no bound was evaluated, or which variant was skipped.
    pub notes: Vec<String>,
}

fn certificate_for(model: &SystemModel, settings: &EdissSettings) -> Result<Option<EdissCertificate>, ExperimentError> {
    if let Some(cert) = settings.certificate {
        cert.validate()?;
        return Ok(Some(cert));
    }
    match model.plant().linear_nominal() {
        Some(a) => Ok(Some(fit_ediss_linear(a, settings.rho_margin, settings.fit_horizon)?)),
        None => Ok(None),
    }
}

/// Evaluates the bounds that apply to the estimator used in `exp` from
/// constants witnessed on that run, and certifies its regret.
pub fn assess_bounds(
    model: &SystemModel,
    estimator: &EstimatorConfig,
    exp: &Experiment,
    settings: &EdissSettings,
) -> Result<BoundAssessment, ExperimentError> {
    let mut out = BoundAssessment {
        certificate: certificate_for(model, settings)?,
        ediss_check: None,
        inputs: None,
        rpl_basic: None,
        rpl_lifted: None,
        rlsff: None,
        bound: None,
        bound_asymptotic: None,
        certification: None,
        notes: Vec::new(),
    };
    let Some(cert) = out.certificate else {
        out.notes
            .push("nominal dynamics are not linear and no certificate was supplied".into());
        return Ok(out);
    };
    if settings.verify_trials > 0 {
        let plant = model.plant();
        out.ediss_check = Some(verify_ediss(
            |k, x| plant.nominal(k, x),
            model.state_dim(),
            &cert,
            settings.verify_trials,
            settings.perturbation_scale,
            settings.verify_horizon,
            settings.seed,
        ));
    }
    let report = &exp.excitation;
    let Some(delta) = report.delta_used else {
        out.notes.push("no positive excitation level δ on this run".into());
        return Ok(out);
    };
    let detected = match estimator {
        EstimatorConfig::Rpl { .. } => report.detected_ts,
        EstimatorConfig::Rlsff { .. } => report.pe_ts,
    };
    let Some(detected) = detected else {
        out.notes.push(format!("excitation level δ = {delta:e} never reached"));
        return Ok(out);
    };
    // Definition-level T_s counts the last index of the exciting prefix, so
    // the contraction holds from sample count T_s + 1 onwards.
    let ts = detected + 1;
    let epsilon = estimator.epsilon();
    let mut inputs = BoundInputs {
        c0: cert.c0,
        cw: cert.cw,
        rho: cert.rho,
        b: exp.b_witness(),
        lipschitz: exp.trace.lipschitz,
        theta_err0: exp.theta_err0(),
        ts,
        constants: rpl_constants(delta, epsilon, report.beta, report.stacked_norm_through(detected))?,
        horizon: Some(exp.trace.per_step.len()),
        lambda: None,
    };
    let evaluate = |inp: &BoundInputs| -> (Option<f64>, Option<f64>, Option<f64>, Vec<String>) {
        let mut notes = Vec::new();
        let mut keep = |r: Result<f64, BoundError>| match r {
            Ok(v) => Some(v),
            Err(e) => {
                notes.push(e.to_string());
                None
            }
        };
        match estimator {
            EstimatorConfig::Rpl { .. } => {
                let basic = keep(bound_rpl_basic(inp));
                let lifted = keep(bound_rpl_lifted(inp, epsilon));
                (basic, lifted, None, notes)
            }
            EstimatorConfig::Rlsff { .. } => (None, None, keep(bound_rlsff(inp)), notes),
        }
    };
    if let Some(lambda_sq) = estimator.lambda_squared() {
        inputs.constants.c_r = Some(rlsff_constant(epsilon, delta, lambda_sq, ts)?);
        inputs.lambda = Some(lambda_sq.sqrt());
    }
    let (basic, lifted, rlsff, notes) = evaluate(&inputs);
    out.notes.extend(notes);
    out.rpl_basic = basic;
    out.rpl_lifted = lifted;
    out.rlsff = rlsff;
    out.bound = [basic, lifted, rlsff].into_iter().flatten().reduce(f64::min);
    let asymptotic = BoundInputs {
        horizon: None,
        ..inputs
    };
    let (a_basic, a_lifted, a_rlsff, _) = evaluate(&asymptotic);
    out.bound_asymptotic = [a_basic, a_lifted, a_rlsff].into_iter().flatten().reduce(f64::min);
    out.certification = out.bound.map(|b| certify(&exp.trace, b));
    out.inputs = Some(inputs);
    Ok(out)
}

/// `|R_T - R_{T/2}| / (1 + |R_{T/2}|)`.
pub fn plateau_gap(trace: &RegretTrace) -> f64 {
    let t = trace.per_step.len();
    let half = trace.at(t / 2);
    (trace.total() - half).abs() / (1.0 + half.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::dynamics::{FeatureMap, LinearPlant};
    use crate::linalg::Matrix;

    fn unit_inputs(ts: usize) -> BoundInputs {
        BoundInputs {
            c0: 1.0,
            cw: 1.0,
            rho: 0.5,
            b: 1.0,
            lipschitz: 1.0,
            theta_err0: 1.0,
            ts,
            constants: ContractionConstants {
                eta: 0.5,
                gamma: Some(0.5),
                epsilon_max: None,
                c_r: Some(1.0),
                c_p: Some(1.0),
            },
            horizon: None,
            lambda: Some(0.5),
        }
    }

    #[test]
    fn bound_examples() {
        assert!((bound_rpl_basic(&unit_inputs(2)).unwrap() - 10.0).abs() < 1e-12);
        assert!((bound_rpl_lifted(&unit_inputs(2), 1.0).unwrap() - 10.0).abs() < 1e-12);
        assert!((bound_rlsff(&unit_inputs(2)).unwrap() - 12.0).abs() < 1e-12);
        assert!(bound_rpl_basic(&unit_inputs(3)).unwrap() > bound_rpl_basic(&unit_inputs(2)).unwrap());
        let zero = BoundInputs {
            theta_err0: 0.0,
            ..unit_inputs(2)
        };
        assert_eq!(bound_rpl_basic(&zero).unwrap(), 0.0);
        assert_eq!(bound_rpl_lifted(&zero, 1.0).unwrap(), 0.0);
        assert_eq!(bound_rlsff(&zero).unwrap(), 0.0);
    }

    #[test]
    fn bound_errors() {
        let mut no_gamma = unit_inputs(2);
        no_gamma.constants.gamma = None;
        assert!(matches!(
            bound_rpl_lifted(&no_gamma, 2.0),
            Err(BoundError::MissingGamma { .. })
        ));
        let mut bad = unit_inputs(2);
        bad.rho = 1.0;
        assert!(bound_rpl_basic(&bad).is_err());
        let mut bad_eta = unit_inputs(2);
        bad_eta.constants.eta = 1.0;
        assert!(bound_rpl_basic(&bad_eta).is_err());
    }

    #[test]
    fn finite_horizon_adds_rho_power() {
        let finite = BoundInputs {
            horizon: Some(1),
            ..unit_inputs(2)
        };
        // ρ^1 = 0.5 adds 0.5/(0.25 * 0.5) = 4
        assert!((bound_rpl_basic(&finite).unwrap() - 14.0).abs() < 1e-12);
    }

    #[test]
    fn rlsff_exceeds_lifted_when_gamma_below_lambda() {
        let mut inputs = unit_inputs(2);
        inputs.constants.gamma = Some(0.3);
        inputs.constants.c_r = Some(1.5);
        inputs.lambda = Some(0.6);
        assert!(bound_rlsff(&inputs).unwrap() > bound_rpl_lifted(&inputs, 1.0).unwrap());
    }

    #[test]
    fn certify_examples() {
        let zero = RegretTrace {
            per_step: vec![0.0; 3],
            cumulative: vec![0.0; 3],
            radius: 0.0,
            lipschitz: 0.0,
            cost: CostKind::Quadratic,
        };
        let c = certify(&zero, 0.0);
        assert!(c.passed);
        assert_eq!(c.slack_ratio, f64::MAX);
        let one = RegretTrace {
            cumulative: vec![0.0, 0.0, 1.0],
            ..zero
        };
        assert!(!certify(&one, 0.5).passed);
        assert_eq!(certify(&one, 4.0).slack_ratio, 4.0);
    }

    #[test]
    fn quadratic_cost_and_lipschitz() {
        assert_eq!(quadratic_cost(&[0.0, 0.0]), 0.0);
        assert_eq!(quadratic_cost(&[3.0, 4.0]), 25.0);
        assert_eq!(lipschitz_estimate(CostKind::Quadratic, 1.0), 2.0);
    }

    fn scalar_model() -> SystemModel {
        let plant = LinearPlant::new(
            Matrix::scaled_identity(1, 0.5),
            Matrix::identity(1),
            FeatureMap::Constant {
                phi: Matrix::identity(1),
            },
        )
        .unwrap();
        SystemModel::new(Arc::new(plant), vec![1.0]).unwrap()
    }

    #[test]
    fn scalar_experiment() {
        let model = scalar_model();
        let est = EstimatorConfig::Rpl {
            epsilon: 1.0,
            theta0: vec![0.0],
        };
        let exp = run_experiment(&ExperimentSpec {
            model: &model,
            estimator: &est,
            x0: &[1.0],
            horizon: 3,
            cost: CostKind::Quadratic,
            delta: DeltaSetting::Fixed(1.0),
            ts_hint: None,
        })
        .unwrap();
        assert!((exp.trace.total() - 0.5).abs() < 1e-15);
        assert_eq!(exp.trace.per_step.len(), 3);
        assert_eq!(exp.excitation.detected_ts, Some(0));
        assert!((exp.trace.radius - 1.1).abs() < 1e-15);
        let a = assess_bounds(&model, &est, &exp, &EdissSettings::default()).unwrap();
        assert!(a.ediss_check.as_ref().unwrap().passed);
        let cert = a.certification.unwrap();
        assert!(cert.passed, "{a:?}");
        assert_eq!(a.inputs.unwrap().ts, 1);
    }

    #[test]
    fn exact_start_has_zero_regret() {
        let model = scalar_model();
        let est = EstimatorConfig::Rlsff {
            epsilon: 1.0,
            lambda_squared: 0.9,
            theta0: vec![1.0],
            allow_low_forgetting: false,
        };
        let exp = run_experiment(&ExperimentSpec {
            model: &model,
            estimator: &est,
            x0: &[1.0],
            horizon: 20,
            cost: CostKind::Quadratic,
            delta: DeltaSetting::Fixed(1.0),
            ts_hint: None,
        })
        .unwrap();
        assert!(exp.trace.per_step.iter().all(|&r| r == 0.0));
        assert_eq!(exp.closed.states, exp.benchmark.states);
        let a = assess_bounds(&model, &est, &exp, &EdissSettings::default()).unwrap();
        assert_eq!(a.bound, Some(0.0));
        assert!(a.certification.unwrap().passed);
    }

    #[test]
    fn theta0_length_checked() {
        let model = scalar_model();
        let est = EstimatorConfig::Rpl {
            epsilon: 1.0,
            theta0: vec![0.0, 0.0],
        };
        let spec = ExperimentSpec {
            model: &model,
            estimator: &est,
            x0: &[1.0],
            horizon: 3,
            cost: CostKind::Quadratic,
            delta: DeltaSetting::Fixed(1.0),
            ts_hint: None,
        };
        assert!(matches!(run_experiment(&spec), Err(ExperimentError::Dynamics(_))));
    }
}
