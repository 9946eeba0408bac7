//! CSV and JSON emission.
//!
//! Floats are written as `{:.16e}` (17 significant digits) so a rerun with the
//! same config reproduces every byte.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use super::config::ExperimentConfig;
use super::scenarios::MatchingDetails;
use crate::dynamics::SystemModel;
use crate::excitation::ExcitationReport;
use crate::linalg;
use crate::regret::{plateau_gap, BoundAssessment, Experiment};

pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn push_row(out: &mut String, cells: impl IntoIterator<Item = String>) {
    let mut first = true;
    for c in cells {
        if !first {
            out.push(',');
        }
        out.push_str(&c);
        first = false;
    }
    out.push('\n');
}

fn names(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (1..=count).map(move |i| format!("{prefix}_{i}"))
}

/// One row per step `k = 0..T-1`: `k, x_*, xstar_*, theta_*, theta_err_norm,
/// regret, cumulative_regret, prefix_lambda_min`.
#[allow(clippy::needless_range_loop)]
pub fn per_step_csv(exp: &Experiment) -> String {
    let n = exp.closed.states[0].len();
    let p = exp.final_estimate.len();
    let mut out = String::new();
    push_row(
        &mut out,
        std::iter::once("k".to_string())
            .chain(names("x", n))
            .chain(names("xstar", n))
            .chain(names("theta", p))
            .chain(
                ["theta_err_norm", "regret", "cumulative_regret", "prefix_lambda_min"]
                    .into_iter()
                    .map(String::from),
            ),
    );
    let estimates = exp.closed.estimates.as_deref().unwrap_or(&[]);
    for k in 0..exp.trace.per_step.len() {
        let row = std::iter::once(k.to_string())
            .chain(exp.closed.states[k].iter().map(|v| num(*v)))
            .chain(exp.benchmark.states[k].iter().map(|v| num(*v)))
            .chain(estimates[k].iter().map(|v| num(*v)))
            .chain([
                num(exp.theta_error[k]),
                num(exp.trace.per_step[k]),
                num(exp.trace.cumulative[k]),
                num(exp.excitation.prefix_lambda_min[k]),
            ]);
        push_row(&mut out, row);
    }
    out
}

/// Tracking and regret curves of two controllers on the same scenario.
///
/// Columns: `k`, `ref_*` (when the scenario tracks a reference), `e_rpl_*`,
/// `e_rlsff_*`, `track_rpl_*` and `track_rlsff_*` (reference plus error),
/// `cumulative_regret_rpl`, `cumulative_regret_rlsff`.
pub fn compare_csv(model: &SystemModel, rpl: &Experiment, rlsff: &Experiment) -> String {
    let n = model.state_dim();
    let plant = model.plant();
    let tracks = plant.reference_state(0).is_some();
    let mut header: Vec<String> = vec!["k".into()];
    if tracks {
        header.extend(names("ref", n));
    }
    header.extend(names("e_rpl", n));
    header.extend(names("e_rlsff", n));
    if tracks {
        header.extend(names("track_rpl", n));
        header.extend(names("track_rlsff", n));
    }
    header.push("cumulative_regret_rpl".into());
    header.push("cumulative_regret_rlsff".into());
    let mut out = String::new();
    push_row(&mut out, header);
    let t = rpl.trace.per_step.len().min(rlsff.trace.per_step.len());
    for k in 0..t {
        let (e1, e2) = (&rpl.closed.states[k], &rlsff.closed.states[k]);
        let mut row = vec![k.to_string()];
        let reference = plant.reference_state(k);
        if let Some(r) = &reference {
            row.extend(r.iter().map(|v| num(*v)));
        }
        row.extend(e1.iter().map(|v| num(*v)));
        row.extend(e2.iter().map(|v| num(*v)));
        if let Some(r) = &reference {
            row.extend(linalg::add(r, e1).iter().map(|v| num(*v)));
            row.extend(linalg::add(r, e2).iter().map(|v| num(*v)));
        }
        row.push(num(rpl.trace.cumulative[k]));
        row.push(num(rlsff.trace.cumulative[k]));
        push_row(&mut out, row);
    }
    out
}

/// `k, prefix_lambda_min, prefix_lambda_max[, window_lambda_min]`.
pub fn excitation_csv(report: &ExcitationReport) -> String {
    let mut out = String::from("k,prefix_lambda_min,prefix_lambda_max");
    if report.window_lambda_min.is_some() {
        out.push_str(",window_lambda_min");
    }
    out.push('\n');
    for k in 0..report.prefix_lambda_min.len() {
        let _ = write!(
            out,
            "{k},{},{}",
            num(report.prefix_lambda_min[k]),
            num(report.prefix_lambda_max[k])
        );
        if let Some(w) = &report.window_lambda_min {
            // windows end at index T_s + j; earlier rows have no full window
            let start = report.prefix_lambda_min.len() - w.len();
            match k.checked_sub(start) {
                Some(j) => {
                    let _ = write!(out, ",{}", num(w[j]));
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct ExcitationSummary {
    pub delta_used: Option<f64>,
    pub delta_auto: bool,
    pub detected_ts: Option<usize>,
    pub pe_ts: Option<usize>,
    pub pe_satisfied: bool,
    pub pe_horizon: usize,
    pub beta: f64,
    pub beta_tail_increment: f64,
    pub final_prefix_lambda_min: Option<f64>,
}

impl From<&ExcitationReport> for ExcitationSummary {
    fn from(r: &ExcitationReport) -> Self {
        Self {
            delta_used: r.delta_used,
            delta_auto: r.delta_auto,
            detected_ts: r.detected_ts,
            pe_ts: r.pe_ts,
            pe_satisfied: r.pe_satisfied,
            pe_horizon: r.pe_horizon,
            beta: r.beta,
            beta_tail_increment: r.beta_tail_increment,
            final_prefix_lambda_min: r.prefix_lambda_min.last().copied(),
        }
    }
}

/// Headline numbers for one controller run.
pub fn run_summary(exp: &Experiment, assessment: &BoundAssessment) -> Value {
    json!({
        "regret_total": exp.trace.total(),
        "regret_plateau_gap": plateau_gap(&exp.trace),
        "final_state_norm": linalg::norm(exp.closed.final_state()),
        "final_theta_error": exp.theta_error.last().copied(),
        "final_estimate": exp.final_estimate,
        "radius": exp.trace.radius,
        "lipschitz": exp.trace.lipschitz,
        "excitation": ExcitationSummary::from(&exp.excitation),
        "bounds": assessment,
    })
}

pub fn simulate_summary(
    cfg: &ExperimentConfig,
    matching: Option<&MatchingDetails>,
    exp: &Experiment,
    assessment: &BoundAssessment,
) -> Value {
    json!({
        "scenario": cfg.scenario.label(),
        "estimator": cfg.estimator.kind.name(),
        "horizon": cfg.horizon,
        "config": cfg,
        "matching": matching,
        "result": run_summary(exp, assessment),
    })
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}

pub fn to_json_text(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("values are serializable");
    s.push('\n');
    s
}

/// Stand-alone plotting script for a compare CSV; needs pandas and matplotlib.
pub fn plot_script(csv_name: &str) -> String {
    format!(
        r#"import sys
import pandas as pd
import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "{csv_name}"
df = pd.read_csv(path)
fig, (top, bottom) = plt.subplots(2, 1, sharex=True)
for col in [c for c in df.columns if c.startswith(("ref_", "track_"))]:
    top.plot(df["k"], df[col], label=col)
top.set_ylabel("state")
top.legend()
for col in [c for c in df.columns if c.startswith("cumulative_regret")]:
    bottom.plot(df["k"], df[col], label=col)
bottom.set_xlabel("k")
bottom.set_ylabel("cumulative regret")
bottom.legend()
plt.show()
"#
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits() {
        assert_eq!(num(0.1), "1.0000000000000001e-1");
        assert_eq!(num(-0.5), "-5.0000000000000000e-1");
        assert_eq!("1.0000000000000001e-1".parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn rows_are_comma_separated() {
        let mut s = String::new();
        push_row(&mut s, ["a".to_string(), "b".to_string()]);
        assert_eq!(s, "a,b\n");
        assert_eq!(names("x", 2).collect::<Vec<_>>(), vec!["x_1", "x_2"]);
    }
}
