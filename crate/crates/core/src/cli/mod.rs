//! Command-line front end.
//!
//! Exit codes: 0 success, 1 validation or usage error, 2 runtime or numerical
//! error, 3 oracle-check failure. Failures are reported on stderr as JSON.

pub mod config;
pub mod output;
pub mod scenarios;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};

use config::{builtin_config, load_config, ConfigError, EstimatorKind, ExperimentConfig, OutputFormat, Overrides};
use output::{num, to_json_text, write_file};
use scenarios::BuiltScenario;

use crate::excitation::{rlsff_constant, rpl_constants, ExcitationReport};
use crate::regret::{
    assess_bounds, bound_rlsff, bound_rpl_basic, bound_rpl_lifted, run_experiment, BoundInputs, Experiment,
    ExperimentSpec,
};

#[derive(Debug, Parser)]
#[command(
    name = "adaptive-regret",
    version,
    about = "Regret-certified adaptive control experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one controller and write the per-step table and summary.
    Simulate(RunArgs),
    /// Run RPL and RLSFF on the same scenario.
    Compare(RunArgs),
    /// Report excitation of the closed-loop regressor stream only.
    Excitation(RunArgs),
    /// Evaluate the regret bounds from a constants file.
    Bounds(BoundsArgs),
    /// Run the recursive-vs-batch and hand-rollout fixtures.
    OracleCheck(OracleArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
    Both,
}

impl FormatArg {
    fn formats(self) -> Vec<OutputFormat> {
        match self {
            FormatArg::Csv => vec![OutputFormat::Csv],
            FormatArg::Json => vec![OutputFormat::Json],
            FormatArg::Both => vec![OutputFormat::Csv, OutputFormat::Json],
        }
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment config; repeat to run a batch in parallel.
    #[arg(long = "config", value_name = "PATH")]
    configs: Vec<PathBuf>,
    /// Builtin scenario to run with default settings.
    #[arg(long, value_name = "NAME")]
    scenario: Option<String>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    horizon: Option<usize>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long)]
    allow_low_forgetting: bool,
    /// Also write a plotting script next to the compare CSV.
    #[arg(long)]
    plot_script: bool,
}

#[derive(Debug, Args)]
struct BoundsArgs {
    #[arg(long, value_name = "PATH")]
    constants: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug)]
pub enum CliError {
    Config { source: Option<String>, error: ConfigError },
    Usage(String),
    Runtime(String),
    OracleFailed(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config {
                error: ConfigError::Io { .. },
                ..
            } => 2,
            CliError::Config { .. } | CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::OracleFailed(_) => 3,
        }
    }

    pub fn to_json(&self) -> Value {
        let body = match self {
            CliError::Config { source, error } => {
                let mut v = json!({ "message": error.to_string(), "source": source });
                match error {
                    ConfigError::Io { path, .. } => {
                        v["kind"] = json!("io");
                        v["path"] = json!(path);
                    }
                    ConfigError::Parse { line, .. } => {
                        v["kind"] = json!("parse");
                        v["line"] = json!(line);
                    }
                    ConfigError::Validation { field, .. } => {
                        v["kind"] = json!("validation");
                        v["field"] = json!(field);
                    }
                }
                v
            }
            CliError::Usage(m) => json!({ "kind": "usage", "message": m }),
            CliError::Runtime(m) => json!({ "kind": "runtime", "message": m }),
            CliError::OracleFailed(names) => {
                json!({ "kind": "oracle", "message": "oracle fixtures failed", "failed": names })
            }
        };
        json!({ "error": body })
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(stdout, "{e}");
            return 0;
        }
        Err(e) => {
            let err = CliError::Usage(e.to_string());
            let _ = write!(stderr, "{}", to_json_text(&err.to_json()));
            return err.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(reports) => {
            for r in reports {
                let _ = write!(stdout, "{}", to_json_text(&r));
            }
            0
        }
        Err(errors) => {
            let code = errors.first().map_or(2, CliError::exit_code);
            for e in &errors {
                let _ = write!(stderr, "{}", to_json_text(&e.to_json()));
            }
            code
        }
    }
}

fn execute(command: Command) -> Result<Vec<Value>, Vec<CliError>> {
    match command {
        Command::Simulate(args) => run_batch(&args, Mode::Simulate),
        Command::Compare(args) => run_batch(&args, Mode::Compare),
        Command::Excitation(args) => run_batch(&args, Mode::Excitation),
        Command::Bounds(args) => bounds_command(&args).map(|v| vec![v]).map_err(|e| vec![e]),
        Command::OracleCheck(args) => oracle_check(args.seed).map(|v| vec![v]).map_err(|e| vec![e]),
    }
}

#[derive(Clone, Copy, Debug)]
enum Mode {
    Simulate,
    Compare,
    Excitation,
}

struct Job {
    stem: String,
    source: Option<String>,
    config: ExperimentConfig,
}

fn jobs(args: &RunArgs) -> Result<Vec<Job>, CliError> {
    let overrides = Overrides {
        horizon: args.horizon,
        allow_low_forgetting: args.allow_low_forgetting,
        out_dir: args.out.as_ref().map(|p| p.display().to_string()),
        formats: args.format.map(FormatArg::formats),
    };
    let mut jobs = Vec::new();
    for path in &args.configs {
        let source = path.display().to_string();
        let config = load_config(path, &overrides).map_err(|error| CliError::Config {
            source: Some(source.clone()),
            error,
        })?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| config.scenario.label().to_string());
        jobs.push(Job {
            stem,
            source: Some(source),
            config,
        });
    }
    if let Some(name) = &args.scenario {
        let config = builtin_config(name, &overrides).map_err(|error| CliError::Config { source: None, error })?;
        jobs.push(Job {
            stem: name.clone(),
            source: None,
            config,
        });
    }
    if jobs.is_empty() {
        return Err(CliError::Usage("give --config PATH or --scenario NAME".into()));
    }
    let mut targets = BTreeSet::new();
    for j in &jobs {
        if !targets.insert((j.config.output.directory.clone(), j.stem.clone())) {
            return Err(CliError::Usage(format!(
                "two runs would write {}/{}.*; rename a config file or change output.directory",
                j.config.output.directory, j.stem
            )));
        }
    }
    Ok(jobs)
}

fn run_batch(args: &RunArgs, mode: Mode) -> Result<Vec<Value>, Vec<CliError>> {
    let jobs = jobs(args).map_err(|e| vec![e])?;
    let results: Vec<Result<Value, CliError>> = if jobs.len() == 1 {
        vec![run_job(&jobs[0], mode, args.plot_script)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .iter()
                .map(|job| scope.spawn(move || run_job(job, mode, args.plot_script)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(CliError::Runtime("worker panicked".into())))
                })
                .collect()
        })
    };
    let (ok, errors): (Vec<_>, Vec<_>) = results.into_iter().partition(Result::is_ok);
    if errors.is_empty() {
        Ok(ok.into_iter().map(Result::unwrap).collect())
    } else {
        Err(errors.into_iter().filter_map(Result::err).collect())
    }
}

fn build_scenario(job: &Job) -> Result<BuiltScenario, CliError> {
    let cfg = &job.config;
    let inline = scenarios::resolve_inline(&cfg.scenario, cfg.seed);
    scenarios::build(&inline, cfg.horizon).map_err(|e| CliError::Config {
        source: job.source.clone(),
        error: ConfigError::Validation {
            field: "scenario".into(),
            message: e.to_string(),
        },
    })
}

fn experiment(built: &BuiltScenario, cfg: &ExperimentConfig, kind: EstimatorKind) -> Result<Experiment, CliError> {
    let estimator = cfg.estimator.config(kind);
    run_experiment(&ExperimentSpec {
        model: &built.model,
        estimator: &estimator,
        x0: &cfg.x0,
        horizon: cfg.horizon,
        cost: cfg.cost,
        delta: cfg.excitation.delta,
        ts_hint: cfg.excitation.ts_hint,
    })
    .map_err(runtime)
}

fn assessed(
    built: &BuiltScenario,
    cfg: &ExperimentConfig,
    kind: EstimatorKind,
) -> Result<(Experiment, crate::regret::BoundAssessment), CliError> {
    let exp = experiment(built, cfg, kind)?;
    let assessment = assess_bounds(&built.model, &cfg.estimator.config(kind), &exp, &cfg.ediss).map_err(runtime)?;
    Ok((exp, assessment))
}

fn run_job(job: &Job, mode: Mode, plot: bool) -> Result<Value, CliError> {
    let cfg = &job.config;
    let built = build_scenario(job)?;
    let dir = Path::new(&cfg.output.directory);
    let csv = cfg.output.wants(OutputFormat::Csv);
    let json_out = cfg.output.wants(OutputFormat::Json);
    let mut files = Vec::new();
    let mut write = |name: String, text: &str| -> Result<(), CliError> {
        let path = write_file(dir, &name, text).map_err(|e| runtime(format!("writing {name}: {e}")))?;
        files.push(path.display().to_string());
        Ok(())
    };
    let headline = match mode {
        Mode::Simulate => {
            let (exp, assessment) = assessed(&built, cfg, cfg.estimator.kind)?;
            if csv {
                write(format!("{}.csv", job.stem), &output::per_step_csv(&exp))?;
            }
            let summary = output::simulate_summary(cfg, built.matching.as_ref(), &exp, &assessment);
            if json_out {
                write(format!("{}.json", job.stem), &to_json_text(&summary))?;
            }
            json!({
                "regret_total": exp.trace.total(),
                "certified": assessment.certification.map(|c| c.passed),
            })
        }
        Mode::Compare => {
            let (rpl, rpl_bounds) = assessed(&built, cfg, EstimatorKind::Rpl)?;
            let (rlsff, rlsff_bounds) = assessed(&built, cfg, EstimatorKind::Rlsff)?;
            if csv {
                write(
                    format!("{}_compare.csv", job.stem),
                    &output::compare_csv(&built.model, &rpl, &rlsff),
                )?;
                write(format!("{}_rpl.csv", job.stem), &output::per_step_csv(&rpl))?;
                write(format!("{}_rlsff.csv", job.stem), &output::per_step_csv(&rlsff))?;
                if plot {
                    let name = format!("{}_compare.csv", job.stem);
                    write(format!("{}_plot.py", job.stem), &output::plot_script(&name))?;
                }
            }
            let summary = json!({
                "scenario": cfg.scenario.label(),
                "horizon": cfg.horizon,
                "config": cfg,
                "matching": built.matching,
                "rpl": output::run_summary(&rpl, &rpl_bounds),
                "rlsff": output::run_summary(&rlsff, &rlsff_bounds),
                "rpl_below_rlsff": rpl.trace.total() < rlsff.trace.total(),
            });
            if json_out {
                write(format!("{}_compare.json", job.stem), &to_json_text(&summary))?;
            }
            json!({
                "regret_total_rpl": rpl.trace.total(),
                "regret_total_rlsff": rlsff.trace.total(),
            })
        }
        Mode::Excitation => {
            let exp = experiment(&built, cfg, cfg.estimator.kind)?;
            let report: &ExcitationReport = &exp.excitation;
            if csv {
                write(format!("{}_excitation.csv", job.stem), &output::excitation_csv(report))?;
            }
            let summary = json!({
                "scenario": cfg.scenario.label(),
                "estimator": cfg.estimator.kind.name(),
                "config": cfg,
                "excitation": output::ExcitationSummary::from(report),
            });
            if json_out {
                write(format!("{}_excitation.json", job.stem), &to_json_text(&summary))?;
            }
            json!(output::ExcitationSummary::from(report))
        }
    };
    Ok(json!({
        "run": job.stem,
        "source": job.source,
        "files": files,
        "result": headline,
    }))
}

/// Inputs for `bounds`. `ts` is the sample count after which the contraction
/// holds (one more than the last index of the exciting prefix).
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstantsFile {
    estimator: EstimatorKind,
    epsilon: f64,
    delta: f64,
    beta: f64,
    #[serde(default)]
    phi_ts_norm: Option<f64>,
    #[serde(default)]
    lambda_squared: Option<f64>,
    c0: f64,
    cw: f64,
    rho: f64,
    b: f64,
    lipschitz: f64,
    theta_err0: f64,
    ts: usize,
    #[serde(default)]
    horizon: Option<usize>,
    /// Empirical `R_T` to certify against the bound.
    #[serde(default)]
    regret: Option<f64>,
}

fn config_error(path: &Path, error: ConfigError) -> CliError {
    CliError::Config {
        source: Some(path.display().to_string()),
        error,
    }
}

fn bounds_command(args: &BoundsArgs) -> Result<Value, CliError> {
    let path = &args.constants;
    let text = std::fs::read_to_string(path).map_err(|e| {
        config_error(
            path,
            ConfigError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            },
        )
    })?;
    let file: ConstantsFile = toml::from_str(&text).map_err(|e| {
        config_error(
            path,
            ConfigError::Parse {
                line: e
                    .span()
                    .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1),
                message: e.message().to_string(),
            },
        )
    })?;
    let invalid = |field: &str, e: &dyn std::fmt::Display| {
        config_error(
            path,
            ConfigError::Validation {
                field: field.into(),
                message: e.to_string(),
            },
        )
    };
    let mut constants =
        rpl_constants(file.delta, file.epsilon, file.beta, file.phi_ts_norm).map_err(|e| invalid("delta", &e))?;
    let lambda = match (file.estimator, file.lambda_squared) {
        (EstimatorKind::Rlsff, None) => {
            return Err(invalid("lambda_squared", &"required for the rlsff bound"));
        }
        (EstimatorKind::Rlsff, Some(l2)) => {
            constants.c_r =
                Some(rlsff_constant(file.epsilon, file.delta, l2, file.ts).map_err(|e| invalid("lambda_squared", &e))?);
            Some(l2.sqrt())
        }
        (EstimatorKind::Rpl, _) => None,
    };
    let inputs = BoundInputs {
        c0: file.c0,
        cw: file.cw,
        rho: file.rho,
        b: file.b,
        lipschitz: file.lipschitz,
        theta_err0: file.theta_err0,
        ts: file.ts,
        constants,
        horizon: file.horizon,
        lambda,
    };
    let as_json = |r: Result<f64, crate::regret::BoundError>| match r {
        Ok(v) => json!(v),
        Err(e) => json!({ "unavailable": e.to_string() }),
    };
    let (basic, lifted, rlsff) = match file.estimator {
        EstimatorKind::Rpl => (
            Some(bound_rpl_basic(&inputs)),
            Some(bound_rpl_lifted(&inputs, file.epsilon)),
            None,
        ),
        EstimatorKind::Rlsff => (None, None, Some(bound_rlsff(&inputs))),
    };
    if let Some(Err(crate::regret::BoundError::InvalidConstants(m))) = basic.as_ref().or(rlsff.as_ref()) {
        return Err(invalid("constants", m));
    }
    let best = [&basic, &lifted, &rlsff]
        .into_iter()
        .flatten()
        .filter_map(|r| r.as_ref().ok().copied())
        .reduce(f64::min);
    let certified = file.regret.zip(best).map(|(r, b)| r <= b);
    let summary = json!({
        "estimator": file.estimator.name(),
        "inputs": inputs,
        "rpl_basic": basic.map(as_json),
        "rpl_lifted": lifted.map(as_json),
        "rlsff": rlsff.map(as_json),
        "bound": best,
        "bound_text": best.map(num),
        "regret": file.regret,
        "certified": certified,
    });
    if let Some(dir) = &args.out {
        write_file(dir, "bounds.json", &to_json_text(&summary)).map_err(runtime)?;
    }
    Ok(summary)
}

fn oracle_check(seed: u64) -> Result<Value, CliError> {
    let outcomes = crate::oracle::run_all(seed);
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.clone()).collect();
    if failed.is_empty() {
        Ok(json!({ "seed": seed, "passed": true, "fixtures": outcomes }))
    } else {
        Err(CliError::OracleFailed(failed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(
            std::iter::once("adaptive-regret").chain(args.iter().copied()),
            &mut out,
            &mut err,
        );
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_one_with_json() {
        let (code, _, err) = run_args(&["simulate"]);
        assert_eq!(code, 1);
        let v: Value = serde_json::from_str(&err).unwrap();
        assert_eq!(v["error"]["kind"], "usage");
        let (code, _, err) = run_args(&["frobnicate"]);
        assert_eq!(code, 1);
        assert!(serde_json::from_str::<Value>(&err).is_ok());
    }

    #[test]
    fn unknown_builtin_is_a_validation_error() {
        let (code, _, err) = run_args(&["simulate", "--scenario", "nope"]);
        assert_eq!(code, 1);
        let v: Value = serde_json::from_str(&err).unwrap();
        assert_eq!(v["error"]["field"], "scenario");
    }

    #[test]
    fn oracle_check_passes() {
        let (code, out, _) = run_args(&["oracle-check"]);
        assert_eq!(code, 0);
        let v: Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["passed"], true);
    }

    #[test]
    fn oracle_failure_exits_three() {
        let e = CliError::OracleFailed(vec!["x".into()]);
        assert_eq!(e.exit_code(), 3);
        assert_eq!(e.to_json()["error"]["failed"][0], "x");
    }
}
