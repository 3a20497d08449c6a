//! End-to-end checks of the binary: exit-code contract, output files,
//! determinism, and resume behavior.

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_stpca");

const BASE_CONFIG: &str = r#"
seed = 3

[model]
n = 16
r = 2
p = 3
lambdas = [3.0, 1.0]

[dynamics]
kind = "sgd"
steps = 64
record_every = 1
[dynamics.delta]
regime = "tensor_p3plus"
c_delta = 0.5

[recovery]
eps = 0.1
eps_prime = 0.05

[sweep]
n_values = [12, 16]
alphas = [0.5, 1.0, 1.5]
budget_coeff = 4.0
trials = 3
success = "permutation"
master_seed = 5
"#;

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .env("STPCA_WORKERS", "2")
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn missing_config_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["simulate", "--config", "nope.toml", "--out", "o"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{BASE_CONFIG}\nbogus_key = 1\n"));
    let out = run(&["simulate", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numeric_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &BASE_CONFIG.replace(
            "[dynamics.delta]\nregime = \"tensor_p3plus\"\nc_delta = 0.5",
            "[dynamics.delta]\nfixed = 1e200",
        ),
    );
    let out = run(&["simulate", "--config", &cfg, "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn simulate_writes_trajectory_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BASE_CONFIG);
    let out = run(&["simulate", "--config", &cfg, "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("exact recovery:"));
    let traj = std::fs::read_to_string(dir.path().join("o/trajectory.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&traj).unwrap();
    assert!(parsed["meta"]["config"].as_str().unwrap().len() == 16);
    assert_eq!(parsed["times"].as_array().unwrap().len(), 65);
    let summary = std::fs::read_to_string(dir.path().join("o/summary.csv")).unwrap();
    assert!(summary.starts_with("# config="));
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn zero_step_override_gives_summary_only_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BASE_CONFIG);
    let out = run(
        &[
            "simulate",
            "--config",
            &cfg,
            "--out",
            "o",
            "--override",
            "dynamics.steps=0",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let traj = std::fs::read_to_string(dir.path().join("o/trajectory.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&traj).unwrap();
    assert_eq!(parsed["times"].as_array().unwrap().len(), 1);
}

#[test]
fn sweep_deterministic_and_resumable_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BASE_CONFIG);
    let args = ["sweep", "--config", &cfg, "--out", "o", "--deterministic"];
    let first = run(&args, dir.path());
    assert_eq!(first.status.code(), Some(0), "{first:?}");
    let csv_once = std::fs::read(dir.path().join("o/sweep.csv")).unwrap();
    assert!(dir.path().join("o/threshold.json").exists());

    // rerun resumes over the existing file and leaves it byte-identical
    let second = run(&args, dir.path());
    assert_eq!(second.status.code(), Some(0));
    let csv_twice = std::fs::read(dir.path().join("o/sweep.csv")).unwrap();
    assert_eq!(csv_once, csv_twice);
    assert_eq!(first.stdout, second.stdout);

    // a config change is refused without --force
    let out = run(
        &[
            "sweep",
            "--config",
            &cfg,
            "--out",
            "o",
            "--deterministic",
            "--override",
            "sweep.master_seed=6",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));

    // report reproduces the table byte-identically across invocations
    let report_cfg = write_config(
        dir.path(),
        &format!(
            "{BASE_CONFIG}\n[report]\nresults = \"{}\"\n",
            dir.path().join("o/sweep.csv").display()
        ),
    );
    let r1 = run(&["report", "--config", &report_cfg], dir.path());
    let r2 = run(&["report", "--config", &report_cfg], dir.path());
    assert_eq!(r1.status.code(), Some(0));
    assert_eq!(r1.stdout, r2.stdout);
    assert!(String::from_utf8(r1.stdout).unwrap().contains("| cell |"));
}

#[test]
fn report_on_missing_results_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("{BASE_CONFIG}\n[report]\nresults = \"missing.csv\"\n"),
    );
    let out = run(&["report", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn sweep_dry_run_prints_flops_and_runs_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BASE_CONFIG);
    let out = run(
        &["sweep", "--config", &cfg, "--out", "o", "--dry-run"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8(out.stdout).unwrap().contains("FLOPs"));
    assert!(!dir.path().join("o/sweep.csv").exists());
}

#[test]
fn flop_guardrail_refuses_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let big = BASE_CONFIG
        .replace("n_values = [12, 16]", "n_values = [100000]")
        .replace("alphas = [0.5, 1.0, 1.5]", "alphas = [2.0]")
        .replace("trials = 3", "trials = 1000");
    let cfg = write_config(dir.path(), &big);
    let out = run(&["sweep", "--config", &cfg, "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("guardrail"));
}

#[test]
fn population_preset_runs_and_truncates_on_blowup() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["population", "--preset", "fig-p2-r2-equal", "--out", "o"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let csv = std::fs::read_to_string(dir.path().join("o/population.csv")).unwrap();
    let last = csv.lines().last().unwrap();
    let fields: Vec<f64> = last.split(',').map(|v| v.parse().unwrap()).collect();
    // theta columns are the last two; both recovered
    assert!(fields[fields.len() - 1] >= 0.99 && fields[fields.len() - 2] >= 0.99);

    // drift-only integration past blow-up truncates with a note, exit 0
    let cfg = write_config(
        dir.path(),
        r#"
[population]
r = 1
p = 3
lambdas = [1.0]
horizon = 10.0
dt = 1e-3
rhs = "drift_only"
init = { m0 = [[0.1]] }
"#,
    );
    let out = run(&["population", "--config", &cfg, "--out", "b"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let meta = std::fs::read_to_string(dir.path().join("b/population.meta.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&meta).unwrap();
    assert!(parsed["blowup"]["t"].as_f64().unwrap() > 3.0);
}

#[test]
fn population_horizon_zero_gives_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "population",
            "--preset",
            "fig-p3-r2",
            "--out",
            "o",
            "--override",
            "population.horizon=0.0",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let csv = std::fs::read_to_string(dir.path().join("o/population.csv")).unwrap();
    // provenance line + header + one data row
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn gradient_flow_preset_config_recovers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/gf-p3-r2.toml")
        .canonicalize()
        .unwrap();
    let out = run(
        &["simulate", "--config", cfg.to_str().unwrap(), "--out", "o"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("exact recovery: true"), "{stdout}");
}

#[test]
fn check_prints_condition_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("{BASE_CONFIG}\n[check]\nsamples = 50\n"),
    );
    let out = run(&["check", "--config", &cfg, "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("| condition | pass rate |"));
    assert!(dir.path().join("o/check.md").exists());
}
