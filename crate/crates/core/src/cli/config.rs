//! Experiment configuration: TOML parsing, validation and default resolution.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::scenarios::{self, InlineScenario, ScenarioRef};
use crate::estimators::{EstimatorConfig, MIN_FORGETTING};
use crate::excitation::DeltaSetting;
use crate::regret::{CostKind, EdissSettings};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("parse error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, message: String },
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Validation {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Rpl,
    Rlsff,
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Rpl => "rpl",
            EstimatorKind::Rlsff => "rlsff",
        }
    }
}

/// Estimator tuning. `lambda_squared` is used when running RLSFF, including in `compare`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSettings {
    pub kind: EstimatorKind,
    pub epsilon: f64,
    pub lambda_squared: f64,
    pub theta0: Vec<f64>,
    pub allow_low_forgetting: bool,
}

impl EstimatorSettings {
    pub fn config(&self, kind: EstimatorKind) -> EstimatorConfig {
        match kind {
            EstimatorKind::Rpl => EstimatorConfig::Rpl {
                epsilon: self.epsilon,
                theta0: self.theta0.clone(),
            },
            EstimatorKind::Rlsff => EstimatorConfig::Rlsff {
                epsilon: self.epsilon,
                lambda_squared: self.lambda_squared,
                theta0: self.theta0.clone(),
                allow_low_forgetting: self.allow_low_forgetting,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcitationSettings {
    pub delta: DeltaSetting,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ts_hint: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputSettings {
    pub directory: String,
    pub formats: Vec<OutputFormat>,
}

impl OutputSettings {
    pub fn wants(&self, f: OutputFormat) -> bool {
        self.formats.contains(&f)
    }
}

pub const DEFAULT_OUTPUT_DIR: &str = "results";

/// A fully resolved experiment: every default is filled in.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub scenario: ScenarioRef,
    pub horizon: usize,
    pub seed: u64,
    pub x0: Vec<f64>,
    pub estimator: EstimatorSettings,
    pub cost: CostKind,
    pub excitation: ExcitationSettings,
    pub ediss: EdissSettings,
    pub output: OutputSettings,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    scenario: Option<toml::Value>,
    horizon: Option<i64>,
    seed: Option<u64>,
    x0: Option<Vec<f64>>,
    estimator: Option<RawEstimator>,
    cost: Option<RawCost>,
    excitation: Option<RawExcitation>,
    ediss: Option<EdissSettings>,
    output: Option<RawOutput>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEstimator {
    kind: Option<String>,
    epsilon: Option<f64>,
    lambda_squared: Option<f64>,
    theta0: Option<Vec<f64>>,
    allow_low_forgetting: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCost {
    kind: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExcitation {
    delta: Option<DeltaSetting>,
    ts_hint: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    directory: Option<String>,
    formats: Option<Vec<String>>,
}

/// Command-line settings that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub horizon: Option<usize>,
    pub allow_low_forgetting: bool,
    pub out_dir: Option<String>,
    pub formats: Option<Vec<OutputFormat>>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config(&text, overrides)
}

pub fn parse_config(text: &str, overrides: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
        line: e.span().map(|s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    resolve(raw, overrides)
}

/// Config for a builtin scenario with every setting at its default.
pub fn builtin_config(name: &str, overrides: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    resolve(
        RawConfig {
            scenario: Some(toml::Value::String(name.into())),
            ..RawConfig::default()
        },
        overrides,
    )
}

pub fn write_config(cfg: &ExperimentConfig) -> Result<String, ConfigError> {
    toml::to_string(cfg).map_err(|e| ConfigError::Parse {
        line: None,
        message: e.to_string(),
    })
}

fn finite_positive(field: &str, v: f64) -> Result<f64, ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(invalid(field, format!("must be a positive finite number, got {v}")))
    }
}

fn resolve(raw: RawConfig, overrides: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let scenario = match raw.scenario {
        None => {
            return Err(invalid(
                "scenario",
                "missing; name a builtin scenario or give an inline table",
            ))
        }
        Some(toml::Value::String(name)) => {
            if !scenarios::BUILTIN_NAMES.contains(&name.as_str()) {
                return Err(invalid(
                    "scenario",
                    format!("unknown scenario {name:?}; builtins are {:?}", scenarios::BUILTIN_NAMES),
                ));
            }
            ScenarioRef::Named(name)
        }
        Some(value @ toml::Value::Table(_)) => {
            let inline: InlineScenario = value
                .try_into()
                .map_err(|e: toml::de::Error| invalid("scenario", e.message()))?;
            ScenarioRef::Inline(Box::new(inline))
        }
        Some(other) => {
            return Err(invalid(
                "scenario",
                format!("expected a name or a table, got {}", other.type_str()),
            ))
        }
    };
    let seed = raw.seed.unwrap_or(0);
    let inline = scenarios::resolve_inline(&scenario, seed);
    let defaults = scenarios::defaults(&scenario, &inline, seed);
    let (n, p) = scenarios::dims(&inline).map_err(|e| invalid("scenario", e.to_string()))?;

    let horizon = match (overrides.horizon, raw.horizon) {
        (Some(h), _) => h as i64,
        (None, Some(h)) => h,
        (None, None) => defaults.horizon as i64,
    };
    if horizon < 1 {
        return Err(invalid("horizon", format!("must be at least 1, got {horizon}")));
    }

    let x0 = raw.x0.unwrap_or(defaults.x0);
    if x0.len() != n || x0.iter().any(|v| !v.is_finite()) {
        return Err(invalid("x0", format!("needs {n} finite entries, got {x0:?}")));
    }

    let est = raw.estimator.unwrap_or_default();
    let kind = match est.kind.as_deref() {
        None | Some("rpl") => EstimatorKind::Rpl,
        Some("rlsff") => EstimatorKind::Rlsff,
        Some(other) => {
            return Err(invalid(
                "estimator.kind",
                format!("unknown estimator {other:?}; use rpl or rlsff"),
            ))
        }
    };
    let epsilon = finite_positive("estimator.epsilon", est.epsilon.unwrap_or(defaults.estimator.epsilon))?;
    let lambda_squared = est.lambda_squared.unwrap_or(defaults.estimator.lambda_squared);
    let allow_low_forgetting = overrides.allow_low_forgetting || est.allow_low_forgetting.unwrap_or(false);
    if !(lambda_squared > 0.0 && lambda_squared < 1.0) {
        return Err(invalid(
            "estimator.lambda_squared",
            format!("must lie in (0, 1), got {lambda_squared}"),
        ));
    }
    if lambda_squared < MIN_FORGETTING && !allow_low_forgetting {
        return Err(invalid(
            "estimator.lambda_squared",
            format!("{lambda_squared} is below {MIN_FORGETTING}; set allow_low_forgetting to override"),
        ));
    }
    let theta0 = est.theta0.unwrap_or(defaults.estimator.theta0);
    if theta0.len() != p || theta0.iter().any(|v| !v.is_finite()) {
        return Err(invalid(
            "estimator.theta0",
            format!("needs {p} finite entries, got {theta0:?}"),
        ));
    }

    let cost = match raw.cost.and_then(|c| c.kind).as_deref() {
        None | Some("quadratic") => CostKind::Quadratic,
        Some(other) => return Err(invalid("cost.kind", format!("unknown cost {other:?}; use quadratic"))),
    };

    let exc = raw.excitation.unwrap_or_default();
    let delta = exc.delta.unwrap_or(defaults.delta);
    if let DeltaSetting::Fixed(d) = delta {
        finite_positive("excitation.delta", d)?;
    }
    let ts_hint = exc.ts_hint.or(defaults.ts_hint);

    let ediss = raw.ediss.unwrap_or_default();
    if !(ediss.rho_margin > 0.0 && ediss.rho_margin <= 1.0) {
        return Err(invalid(
            "ediss.rho_margin",
            format!("must lie in (0, 1], got {}", ediss.rho_margin),
        ));
    }
    if !(ediss.perturbation_scale >= 0.0 && ediss.perturbation_scale.is_finite()) {
        return Err(invalid("ediss.perturbation_scale", "must be finite and nonnegative"));
    }
    if let Some(cert) = &ediss.certificate {
        cert.validate()
            .map_err(|e| invalid("ediss.certificate", e.to_string()))?;
    }

    let raw_out = raw.output.unwrap_or_default();
    let formats = match (&overrides.formats, raw_out.formats) {
        (Some(f), _) => f.clone(),
        (None, Some(names)) => names
            .iter()
            .map(|s| match s.as_str() {
                "csv" => Ok(OutputFormat::Csv),
                "json" => Ok(OutputFormat::Json),
                other => Err(invalid(
                    "output.formats",
                    format!("unknown format {other:?}; use csv or json"),
                )),
            })
            .collect::<Result<Vec<_>, _>>()?,
        (None, None) => vec![OutputFormat::Csv, OutputFormat::Json],
    };
    if formats.is_empty() {
        return Err(invalid("output.formats", "at least one format is required"));
    }
    let directory = overrides
        .out_dir
        .clone()
        .or(raw_out.directory)
        .unwrap_or_else(|| DEFAULT_OUTPUT_DIR.into());

    Ok(ExperimentConfig {
        scenario,
        horizon: horizon as usize,
        seed,
        x0,
        estimator: EstimatorSettings {
            kind,
            epsilon,
            lambda_squared,
            theta0,
            allow_low_forgetting,
        },
        cost,
        excitation: ExcitationSettings { delta, ts_hint },
        ediss,
        output: OutputSettings { directory, formats },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        parse_config(text, &Overrides::default())
    }

    #[test]
    fn minimal_paper_config() {
        let c = parse("scenario = \"mrac-paper\"\n").unwrap();
        assert_eq!(c.horizon, 500);
        assert_eq!(c.estimator.epsilon, 1.0);
        assert_eq!(c.estimator.theta0, vec![5.0, -1.0]);
        assert_eq!(c.estimator.lambda_squared, 0.99);
        assert_eq!(c.estimator.kind, EstimatorKind::Rpl);
    }

    #[test]
    fn low_forgetting_guard() {
        let text = "scenario = \"mrac-paper\"\n[estimator]\nkind = \"rlsff\"\nlambda_squared = 0.3\n";
        assert!(
            matches!(parse(text), Err(ConfigError::Validation { field, .. }) if field == "estimator.lambda_squared")
        );
        let ok = parse_config(
            text,
            &Overrides {
                allow_low_forgetting: true,
                ..Overrides::default()
            },
        )
        .unwrap();
        assert!(ok.estimator.allow_low_forgetting);
    }

    #[test]
    fn validation_errors_name_fields() {
        let field = |text: &str| match parse(text) {
            Err(ConfigError::Validation { field, .. }) => field,
            other => panic!("expected a validation error, got {other:?}"),
        };
        assert_eq!(
            field("scenario = \"mrac-paper\"\n[estimator]\nkind = \"lms\"\n"),
            "estimator.kind"
        );
        assert_eq!(field("scenario = \"mrac-paper\"\nhorizon = 0\n"), "horizon");
        assert_eq!(field("scenario = \"nope\"\n"), "scenario");
        assert_eq!(field("horizon = 3\n"), "scenario");
        assert_eq!(
            field("scenario = \"mrac-paper\"\n[estimator]\nepsilon = -1.0\n"),
            "estimator.epsilon"
        );
        assert_eq!(
            field("scenario = \"mrac-paper\"\n[estimator]\ntheta0 = [1.0]\n"),
            "estimator.theta0"
        );
        assert_eq!(field("scenario = \"mrac-paper\"\nx0 = [1.0]\n"), "x0");
        assert_eq!(
            field("scenario = \"mrac-paper\"\n[output]\nformats = [\"xml\"]\n"),
            "output.formats"
        );
        assert_eq!(
            field("scenario = \"mrac-paper\"\n[excitation]\ndelta = -2.0\n"),
            "excitation.delta"
        );
        assert_eq!(
            field("scenario = \"mrac-paper\"\n[cost]\nkind = \"abs\"\n"),
            "cost.kind"
        );
    }

    #[test]
    fn parse_errors_carry_line() {
        match parse("scenario = \"mrac-paper\"\n\nhorizon = = 3\n") {
            Err(ConfigError::Parse { line, .. }) => assert_eq!(line, Some(3)),
            other => panic!("expected a parse error, got {other:?}"),
        }
        match parse("scenario = \"mrac-paper\"\nhorizn = 3\n") {
            Err(ConfigError::Parse { line, .. }) => assert_eq!(line, Some(2)),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn overrides_take_precedence() {
        let c = parse_config(
            "scenario = \"scalar-hand\"\nhorizon = 9\n",
            &Overrides {
                horizon: Some(3),
                out_dir: Some("elsewhere".into()),
                formats: Some(vec![OutputFormat::Csv]),
                ..Overrides::default()
            },
        )
        .unwrap();
        assert_eq!(c.horizon, 3);
        assert_eq!(c.output.directory, "elsewhere");
        assert!(!c.output.wants(OutputFormat::Json));
    }

    #[test]
    fn round_trip_builtins() {
        for name in scenarios::BUILTIN_NAMES {
            let c = builtin_config(name, &Overrides::default()).unwrap();
            let text = write_config(&c).unwrap();
            assert_eq!(parse(&text).unwrap(), c, "{name}:\n{text}");
        }
    }

    #[test]
    fn inline_linear_scenario() {
        let text = r#"
horizon = 5
x0 = [1.0]

[scenario]
kind = "linear"
a = [[0.5]]
b = [[1.0]]
theta_star = [1.0]
features = { kind = "constant", phi = [[1.0]] }

[excitation]
delta = 1.0
"#;
        let c = parse(text).unwrap();
        assert_eq!(c.estimator.theta0, vec![0.0]);
        assert_eq!(c.excitation.delta, DeltaSetting::Fixed(1.0));
        assert_eq!(parse(&write_config(&c).unwrap()).unwrap(), c);
    }
}
