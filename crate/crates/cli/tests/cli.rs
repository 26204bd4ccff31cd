use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stableflow"));
    c.env("RUST_LOG", "warn").env("STABLEFLOW_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path, lambda_tau: f64, learning_rate: f64) -> PathBuf {
    let cfg = serde_json::json!({
        "iterations": 40, "batch_size": 32, "learning_rate": learning_rate, "weight_decay": 1e-4,
        "adam_beta1": 0.9, "adam_beta2": 0.999, "adam_eps": 1e-8, "seed": 3,
        "loss": { "batch_size": 32, "loss_kind": "auto_unnormalized", "sigma_min": 0.0, "eps_tau_guard": 1e-3 },
        "ccnf": { "lambda_z": 4.6, "lambda_tau": lambda_tau, "tau0": 0.0, "tau1": 1.0,
                  "z0_mean": [0.0, 0.0], "sigma0_diag": [1.0, 1.0] },
        "net": { "hidden_layers": 2, "hidden_width": 8 },
        "log_every": 10,
        "data": { "name": "moons", "n": 300 }
    });
    let path = dir.join(format!("cfg_{lambda_tau}_{:e}.json", learning_rate));
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn trained(dir: &Path) -> PathBuf {
    let out = dir.join("run");
    let o = run(&["train", "--config", s(&small_config(dir, 2.3, 1e-3)), "--out", s(&out), "--deterministic"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.join("checkpoint.json")
}

#[test]
fn train_writes_every_listed_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let ck = trained(dir.path());
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["success"], true);
    for (_, p) in manifest["artifacts"].as_object().unwrap() {
        assert!(Path::new(p.as_str().unwrap()).exists(), "{p}");
    }
    assert!(ck.exists());
    let losses = fs::read_to_string(dir.path().join("run/loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 41);
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2.3, 1e-3);
    for out in ["a", "b"] {
        let o = run(&["train", "--config", s(&cfg), "--out", s(&dir.path().join(out)), "--deterministic"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["checkpoint.json", "loss.csv"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn non_positive_rate_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--config", s(&small_config(dir.path(), -1.0, 1e-3)), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("lambda_tau") && err.contains("positive definite"), "{err}");
}

#[test]
fn missing_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--config", s(&dir.path().join("nope.json")), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn numeric_fault_exits_3_with_report_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = run(&["train", "--config", s(&small_config(dir.path(), 2.3, 1e300)), "--out", s(&out)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(out.join("fault.json").exists());
    assert!(out.join("checkpoint.json").exists());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ck = trained(dir.path());
    let text = fs::read_to_string(&ck).unwrap();
    let cut = dir.path().join("cut.json");
    fs::write(&cut, &text[..text.len() / 2]).unwrap();
    let o = run(&["sample", "--checkpoint", s(&cut), "--out", s(&dir.path().join("s"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("parse error at byte"), "{}", stderr(&o));
}

#[test]
fn sampling() {
    let dir = tempfile::tempdir().unwrap();
    let ck = trained(dir.path());
    let empty = dir.path().join("s0");
    let o = run(&["sample", "--checkpoint", s(&ck), "--n", "0", "--out", s(&empty)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(empty.join("trajectories.csv")).unwrap(), "sample_id,t,z1,z2,tau\n");

    let out = dir.path().join("s");
    let o = run(&["sample", "--checkpoint", s(&ck), "--n", "20", "--t-end", "1.5", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("trajectories.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 20 * 151);
    for line in csv.lines().skip(1) {
        assert!(line.split(',').all(|v| v.parse::<f64>().unwrap().is_finite()));
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["divergence"]["count"], 0);
}

#[test]
fn grid_has_one_row_per_node() {
    let dir = tempfile::tempdir().unwrap();
    let ck = trained(dir.path());
    let out = dir.path().join("g");
    let o = run(&["grid", "--checkpoint", s(&ck), "--resolution", "2,2", "--bounds=-1,1,-1,1", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn eval_reports_three_times_and_rejects_empty_data() {
    let dir = tempfile::tempdir().unwrap();
    let ck = trained(dir.path());
    let out = dir.path().join("e");
    let o = run(&["eval", "--checkpoint", s(&ck), "--dataset", "moons", "--n", "50", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["support_distance"].as_array().unwrap().len(), 3);
    assert!(report["lyapunov"]["max_lie_derivative"].as_f64().unwrap() <= 0.0);

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "z1,z2\n").unwrap();
    let o = run(&["eval", "--checkpoint", s(&ck), "--dataset", s(&empty), "--out", s(&dir.path().join("e2"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_math_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["verify", "--suite", "math", "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
}

#[test]
fn verify_flags_a_corrupted_rate_sign() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("p.json");
    fs::write(
        &params,
        r#"{"lambda_z":4.6,"lambda_tau":-2.3,"tau0":0,"tau1":1,"z0_mean":[0,0],"sigma0_diag":[1,1]}"#,
    )
    .unwrap();
    let o = run(&["verify", "--suite", "math", "--params", s(&params)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("positivity"), "{}", stderr(&o));
}

#[test]
fn verify_grad_suite_is_fast() {
    let start = std::time::Instant::now();
    let o = run(&["verify", "--suite", "grad"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(start.elapsed().as_secs_f64() < 60.0);
}

#[test]
fn generate_writes_csv_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["generate", "--dataset", "circles", "--n", "100", "--out", s(dir.path()), "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.path().join("data.csv")).unwrap().lines().count(), 101);
    assert!(dir.path().join("data.json").exists());
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(code(&run(&["bogus"])), 2);
}
