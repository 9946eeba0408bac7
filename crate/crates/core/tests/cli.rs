use std::path::Path;
use std::process::{Command, Output};

use adaptive_regret::cli::config::{builtin_config, load_config, write_config, Overrides};
use serde_json::Value;
use tempfile::TempDir;

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adaptive-regret"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("errors are JSON")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn simulate_scalar_hand_writes_table() {
    let tmp = TempDir::new().unwrap();
    let out = bin(
        &[
            "simulate",
            "--scenario",
            "scalar-hand",
            "--horizon",
            "3",
            "--out",
            "res",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("res/scalar-hand.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "k,x_1,xstar_1,theta_1,theta_err_norm,regret,cumulative_regret,prefix_lambda_min"
    );
    assert_eq!(lines.len(), 4);
    let last: f64 = lines[3].split(',').nth(6).unwrap().parse().unwrap();
    assert!((last - 0.5).abs() < 1e-12);
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("res/scalar-hand.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["horizon"], 3);
    assert_eq!(summary["result"]["bounds"]["certification"]["passed"], true);
}

#[test]
fn exact_start_gives_zero_regret() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "truth.toml",
        "scenario = \"mrac-matched\"\nhorizon = 50\n[estimator]\ntheta0 = [0.75, 0.5]\n[output]\nformats = [\"csv\"]\n",
    );
    let out = bin(&["simulate", "--config", &cfg, "--out", "res"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("res/truth.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        let n = cells.len();
        assert_eq!(cells[n - 3].parse::<f64>().unwrap(), 0.0, "{line}");
        assert_eq!(cells[n - 2].parse::<f64>().unwrap(), 0.0, "{line}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    for dir in ["a", "b"] {
        let out = bin(
            &[
                "simulate",
                "--scenario",
                "random-matched",
                "--horizon",
                "200",
                "--out",
                dir,
            ],
            tmp.path(),
        );
        assert_eq!(out.status.code(), Some(0));
    }
    let a = std::fs::read(tmp.path().join("a/random-matched.csv")).unwrap();
    let b = std::fs::read(tmp.path().join("b/random-matched.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn batch_runs_write_distinct_files() {
    let tmp = TempDir::new().unwrap();
    let one = write(tmp.path(), "one.toml", "scenario = \"scalar-hand\"\n");
    let two = write(
        tmp.path(),
        "two.toml",
        "scenario = \"random-matched\"\nseed = 5\nhorizon = 100\n",
    );
    let out = bin(
        &[
            "simulate", "--config", &one, "--config", &two, "--out", "res", "--format", "csv",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("res/one.csv").exists());
    assert!(tmp.path().join("res/two.csv").exists());
    assert!(!tmp.path().join("res/one.json").exists());

    let clash = bin(&["simulate", "--config", &one, "--config", &one], tmp.path());
    assert_eq!(clash.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let bad_syntax = write(tmp.path(), "syntax.toml", "scenario = \"mrac-paper\"\nhorizon = = 2\n");
    let out = bin(&["simulate", "--config", &bad_syntax], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "parse");
    assert_eq!(err["error"]["line"], 2);

    let low = write(
        tmp.path(),
        "low.toml",
        "scenario = \"mrac-paper\"\n[estimator]\nkind = \"rlsff\"\nlambda_squared = 0.3\n",
    );
    let out = bin(&["simulate", "--config", &low], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"]["field"], "estimator.lambda_squared");
    let out = bin(
        &[
            "simulate",
            "--config",
            &low,
            "--allow-low-forgetting",
            "--horizon",
            "20",
            "--out",
            "res",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let out = bin(&["simulate", "--config", "missing.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "io");

    // a scalar plant with gain 1e200 overflows after two steps
    let blowup = write(
        tmp.path(),
        "blowup.toml",
        r#"horizon = 10
x0 = [1.0]
[scenario]
kind = "linear"
a = [[1e200]]
b = [[1.0]]
theta_star = [1.0]
features = { kind = "constant", phi = [[1.0]] }
"#,
    );
    let out = bin(&["simulate", "--config", &blowup, "--out", "res"], tmp.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stderr_json(&out)["error"]["kind"], "runtime");

    let out = bin(&["simulate", "--scenario", "mrac-paper", "--format", "xml"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"]["kind"], "usage");

    let out = bin(&["oracle-check"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn compare_orders_controllers_and_writes_curves() {
    let tmp = TempDir::new().unwrap();
    let out = bin(
        &["compare", "--scenario", "mrac-paper", "--out", "res", "--plot-script"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("res/mrac-paper_compare.csv")).unwrap();
    assert!(csv.starts_with("k,ref_1,ref_2,e_rpl_1,e_rpl_2,e_rlsff_1,e_rlsff_2,track_rpl_1"));
    assert_eq!(csv.lines().count(), 501);
    assert!(tmp.path().join("res/mrac-paper_plot.py").exists());
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("res/mrac-paper_compare.json")).unwrap())
            .unwrap();
    assert_eq!(summary["rpl_below_rlsff"], true);
}

#[test]
fn bounds_from_constants_file() {
    let tmp = TempDir::new().unwrap();
    let constants = write(
        tmp.path(),
        "c.toml",
        "estimator = \"rlsff\"\nepsilon = 1.0\ndelta = 1.0\nbeta = 4.0\nlambda_squared = 0.81\nc0 = 1.0\ncw = 1.0\nrho = 0.5\nb = 1.0\nlipschitz = 2.0\ntheta_err0 = 1.0\nts = 1\nregret = 1000.0\n",
    );
    let out = bin(&["bounds", "--constants", &constants, "--out", "res"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let bound = v["bound"].as_f64().unwrap();
    assert!(bound.is_finite() && bound > 0.0);
    assert_eq!(v["certified"], false);
    assert!(tmp.path().join("res/bounds.json").exists());

    let broken = write(tmp.path(), "broken.toml", "estimator = \"rlsff\"\n");
    let out = bin(&["bounds", "--constants", &broken], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_round_trips_through_files() {
    let tmp = TempDir::new().unwrap();
    for name in ["mrac-paper", "mrac-matched", "scalar-hand", "random-matched"] {
        let cfg = builtin_config(name, &Overrides::default()).unwrap();
        let path = tmp.path().join(format!("{name}.toml"));
        std::fs::write(&path, write_config(&cfg).unwrap()).unwrap();
        assert_eq!(load_config(&path, &Overrides::default()).unwrap(), cfg);
    }
}
