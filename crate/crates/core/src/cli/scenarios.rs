//! Builtin and inline scenarios.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    build_mrac_error_system, spectral_radius, DynamicsError, FeatureMap, LinearPlant, MracSpec, ReferenceInput,
    SineTerm, SystemModel,
};
use crate::excitation::DeltaSetting;
use crate::linalg::Matrix;
use crate::oracle::random_vector;

pub const BUILTIN_NAMES: [&str; 4] = ["mrac-paper", "mrac-matched", "scalar-hand", "random-matched"];

/// Feedback gain used to construct the exactly matched MRAC variant.
pub const MATCHED_K1: [f64; 2] = [3.4, 3.0];

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ScenarioRef {
    Named(String),
    Inline(Box<InlineScenario>),
}

impl ScenarioRef {
    pub fn label(&self) -> &str {
        match self {
            ScenarioRef::Named(name) => name,
            ScenarioRef::Inline(_) => "inline",
        }
    }
}

fn state_features() -> FeatureMap {
    FeatureMap::State
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
#[allow(clippy::large_enum_variant)]
pub enum InlineScenario {
    /// `x⁺ = A x + B(u - φ(x)ᵀθ*)`.
    Linear {
        a: Matrix,
        b: Matrix,
        features: FeatureMap,
        theta_star: Vec<f64>,
    },
    /// Tracking error of `x⁺ = A x + B(u - ψ(x)ᵀθ*)` against `x̄⁺ = A_r x̄ + B_r r`.
    Mrac {
        a: Matrix,
        b: Matrix,
        a_r: Matrix,
        b_r: Matrix,
        #[serde(default = "state_features")]
        features: FeatureMap,
        theta_star: Vec<f64>,
        x_bar0: Vec<f64>,
        #[serde(default)]
        reference: ReferenceInput,
        #[serde(skip_serializing_if = "Option::is_none")]
        k1: Option<Matrix>,
        #[serde(skip_serializing_if = "Option::is_none")]
        k2: Option<Matrix>,
    },
}

fn paper_a() -> Matrix {
    Matrix::from_rows(&[[1.0314, 0.2526], [0.2526, 1.0314]]).expect("finite")
}

fn paper_b() -> Matrix {
    Matrix::column(&[0.0314, 0.2526])
}

fn paper_a_r() -> Matrix {
    Matrix::from_rows(&[[-0.9929, 0.2253], [-0.0569, 0.8117]]).expect("finite")
}

pub const PAPER_THETA_STAR: [f64; 2] = [0.75, 0.5];
pub const PAPER_THETA0: [f64; 2] = [5.0, -1.0];
pub const PAPER_X0: [f64; 2] = [0.2, 0.2];

fn mrac(a: Matrix, a_r: Matrix) -> InlineScenario {
    InlineScenario::Mrac {
        a,
        b: paper_b(),
        a_r,
        b_r: paper_b(),
        features: FeatureMap::State,
        theta_star: PAPER_THETA_STAR.to_vec(),
        x_bar0: PAPER_X0.to_vec(),
        reference: ReferenceInput::default_multisine(),
        k1: None,
        k2: None,
    }
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, random_vector(rng, rows * cols)).expect("finite")
}

/// Exactly matched random MRAC problem: `A_r` is drawn stable first and
/// `A = A_r + B K1` for a random gain.
pub fn random_matched(seed: u64) -> (InlineScenario, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=3);
    let b = gaussian_matrix(&mut rng, n, 1);
    let b_norm = b.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
    let b = b.scale(rng.gen_range(0.5..1.5) / b_norm);
    let a_r = loop {
        let m = gaussian_matrix(&mut rng, n, n);
        let sr = spectral_radius(&m).expect("square");
        if sr > 1e-3 {
            break m.scale(rng.gen_range(0.3..0.8) / sr);
        }
    };
    let k1 = gaussian_matrix(&mut rng, 1, n);
    let a = a_r.add(&b.matmul(&k1));
    let theta_star = random_vector(&mut rng, n);
    let theta0: Vec<f64> = theta_star.iter().map(|t| t + 2.0 * rng.gen_range(-1.0..1.0)).collect();
    let terms = (0..3)
        .map(|_| SineTerm {
            amplitude: rng.gen_range(0.5..1.5),
            frequency: rng.gen_range(0.05..0.6),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        })
        .collect();
    let scenario = InlineScenario::Mrac {
        a,
        b: b.clone(),
        a_r,
        b_r: b,
        features: FeatureMap::State,
        theta_star,
        x_bar0: random_vector(&mut rng, n),
        reference: ReferenceInput::MultiSine { terms },
        k1: None,
        k2: None,
    };
    (scenario, theta0)
}

/// The concrete system behind a scenario reference.
pub fn resolve_inline(scenario: &ScenarioRef, seed: u64) -> InlineScenario {
    match scenario {
        ScenarioRef::Inline(s) => (**s).clone(),
        ScenarioRef::Named(name) => match name.as_str() {
            "mrac-paper" => mrac(paper_a(), paper_a_r()),
            "mrac-matched" => {
                let k1 = Matrix::from_rows(&[MATCHED_K1]).expect("finite");
                mrac(paper_a(), paper_a().sub(&paper_b().matmul(&k1)))
            }
            "scalar-hand" => InlineScenario::Linear {
                a: Matrix::scaled_identity(1, 0.5),
                b: Matrix::identity(1),
                features: FeatureMap::Constant {
                    phi: Matrix::identity(1),
                },
                theta_star: vec![1.0],
            },
            "random-matched" => random_matched(seed).0,
            other => unreachable!("unknown builtin {other}; names are validated on load"),
        },
    }
}

pub struct EstimatorDefaults {
    pub epsilon: f64,
    pub lambda_squared: f64,
    pub theta0: Vec<f64>,
}

pub struct ScenarioDefaults {
    pub horizon: usize,
    pub x0: Vec<f64>,
    pub estimator: EstimatorDefaults,
    pub delta: DeltaSetting,
    pub ts_hint: Option<usize>,
}

pub fn defaults(scenario: &ScenarioRef, inline: &InlineScenario, seed: u64) -> ScenarioDefaults {
    let (n, p) = dims(inline).unwrap_or((0, 0));
    let paper = |horizon| ScenarioDefaults {
        horizon,
        x0: vec![0.0; 2],
        estimator: EstimatorDefaults {
            epsilon: 1.0,
            lambda_squared: 0.99,
            theta0: PAPER_THETA0.to_vec(),
        },
        delta: DeltaSetting::default(),
        ts_hint: None,
    };
    let generic = |horizon, theta0| ScenarioDefaults {
        horizon,
        x0: vec![0.0; n],
        estimator: EstimatorDefaults {
            epsilon: 1.0,
            lambda_squared: 0.99,
            theta0,
        },
        delta: DeltaSetting::default(),
        ts_hint: None,
    };
    match scenario.label() {
        "mrac-paper" => paper(500),
        "mrac-matched" => paper(2000),
        "scalar-hand" => ScenarioDefaults {
            horizon: 40,
            x0: vec![1.0],
            estimator: EstimatorDefaults {
                epsilon: 1.0,
                lambda_squared: 0.9,
                theta0: vec![0.0],
            },
            delta: DeltaSetting::Fixed(1.0),
            ts_hint: None,
        },
        "random-matched" => generic(2000, random_matched(seed).1),
        _ => generic(500, vec![0.0; p]),
    }
}

/// `(state_dim, param_dim)`.
pub fn dims(inline: &InlineScenario) -> Result<(usize, usize), DynamicsError> {
    let (a, b, features, theta_star) = match inline {
        InlineScenario::Linear {
            a,
            b,
            features,
            theta_star,
        }
        | InlineScenario::Mrac {
            a,
            b,
            features,
            theta_star,
            ..
        } => (a, b, features, theta_star),
    };
    let n = a.rows();
    let (p, m) = features.shape(n);
    if !a.is_square() || b.rows() != n || b.cols() != m || theta_star.len() != p {
        return Err(DynamicsError::DimensionMismatch(format!(
            "A {:?}, B {:?}, features {p}x{m}, θ* of length {}",
            a.shape(),
            b.shape(),
            theta_star.len()
        )));
    }
    Ok((n, p))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchingDetails {
    pub k1: Matrix,
    pub k2: Matrix,
    pub residual: f64,
    pub warning: Option<String>,
    pub reference_spectral_radius: f64,
}

#[derive(Clone, Debug)]
pub struct BuiltScenario {
    pub model: SystemModel,
    pub matching: Option<MatchingDetails>,
}

pub fn build(inline: &InlineScenario, horizon: usize) -> Result<BuiltScenario, DynamicsError> {
    dims(inline)?;
    match inline.clone() {
        InlineScenario::Linear {
            a,
            b,
            features,
            theta_star,
        } => {
            let plant = LinearPlant::new(a, b, features)?;
            Ok(BuiltScenario {
                model: SystemModel::new(Arc::new(plant), theta_star)?,
                matching: None,
            })
        }
        InlineScenario::Mrac {
            a,
            b,
            a_r,
            b_r,
            features,
            theta_star,
            x_bar0,
            reference,
            k1,
            k2,
        } => {
            let gains = match (k1, k2) {
                (Some(k1), Some(k2)) => Some((k1, k2)),
                (None, None) => None,
                _ => {
                    return Err(DynamicsError::InvalidArgument(
                        "supply both k1 and k2 or neither".into(),
                    ))
                }
            };
            let sys = build_mrac_error_system(&MracSpec {
                a,
                b,
                a_r,
                b_r,
                psi: features,
                theta_star,
                reference,
                x_bar0,
                gains,
                reference_capacity: horizon + 1,
            })?;
            Ok(BuiltScenario {
                model: sys.model,
                matching: Some(MatchingDetails {
                    k1: sys.k1,
                    k2: sys.k2,
                    residual: sys.matching_residual,
                    warning: sys.matching_warning,
                    reference_spectral_radius: sys.spectral_radius,
                }),
            })
        }
    }
}
