use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lab(config: &str, dir: &Path, extra: &[&str]) -> Output {
    let cfg = dir.join("config.json");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_resolvent-lab"))
        .arg("--config")
        .arg(&cfg)
        .arg("--outdir")
        .arg(dir.join("out"))
        .args(extra)
        .env_remove("RESOLVENT_LAB_WORKERS")
        .output()
        .unwrap()
}

fn read(dir: &Path, rel: &str) -> String {
    fs::read_to_string(dir.join("out").join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn zero_payoff_estimate_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(
        r#"{"model": {"lambda": 0.5}, "task": "estimate",
            "estimate": {"payoff": {"kind": "constant", "value": 0.0}, "samples": 64,
                         "estimators": ["killing", "chain_coins"]}}"#,
        dir.path(),
        &[],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(dir.path(), "data/results.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "query_id,estimator,mean,stderr,n,biased_flag");
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[2].parse::<f64>().unwrap(), 0.0);
    }
    let manifest: serde_json::Value = serde_json::from_str(&read(dir.path(), "manifest.json")).unwrap();
    assert_eq!(manifest["config"]["task"], "estimate");
    assert!(manifest["code_version"].is_string());
}

#[test]
fn identical_seeds_give_identical_bytes_across_worker_counts() {
    let cfg = r#"{"model": {"lambda": 0.25, "potential": {"kind": "cosine", "v0": 1.0}}, "task": "estimate", "seed": 5,
                  "estimate": {"queries": [{"x": 0.0, "p": 2.0}, {"x": 0.3, "p": 5.0}], "samples": 400,
                               "estimators": ["killing", "exp_weight", "chain_weights", "chain_coins"]}}"#;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(lab(cfg, a.path(), &["--workers", "1"]).status.success());
    assert!(lab(cfg, b.path(), &["--workers", "3"]).status.success());
    assert_eq!(read(a.path(), "data/results.csv"), read(b.path(), "data/results.csv"));
    let sim = r#"{"model": {"lambda": 0.25, "potential": {"kind": "cosine", "v0": 1.0}}, "task": "simulate",
                  "simulate": {"start": {"x": 0.1, "p": 3.0}, "horizon": 20.0, "paths": 2}}"#;
    assert!(lab(sim, a.path(), &["--workers", "1"]).status.success());
    assert!(lab(sim, b.path(), &["--workers", "2"]).status.success());
    for i in 0..2 {
        let rel = format!("data/trajectory_{i}.csv");
        assert_eq!(read(a.path(), &rel), read(b.path(), &rel));
        assert!(read(a.path(), &rel).starts_with("time,kind,x,p,H\n"));
    }
}

#[test]
fn verify_on_flat_toy_sizes_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(
        r#"{"model": {"lambda": 0.5}, "task": "verify",
            "verify": {"samples": 200, "tail_samples": 2000, "homogenization_momenta": [3.0]}}"#,
        dir.path(),
        &[],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for name in [
        "resolvent_bound_A_B_first",
        "low_energy_integral",
        "collision_drift",
        "skeleton_drift",
        "homogenization_error",
        "high_energy_excursion",
        "skeleton_drop_tail",
    ] {
        let report: serde_json::Value =
            serde_json::from_str(&read(dir.path(), &format!("reports/{name}.json"))).unwrap();
        assert_eq!(report["pass"], true, "{name}");
    }
}

#[test]
fn sweep_writes_one_row_per_lambda_and_inequality() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(
        r#"{"model": {"lambda": 0.5}, "task": "sweep", "sweep": {"lambdas": [0.5, 0.25]},
            "verify": {"checks": ["collision_drift", "skeleton_drift"]}}"#,
        dir.path(),
        &[],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = read(dir.path(), "data/sweep.csv");
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), "inequality_id,lambda,c_hat,ratio,pass");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().filter(|r| r.starts_with("collision_drift,")).count(), 2);
}

#[test]
fn failed_bound_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    // a ceiling below one fails as soon as the fitted constant grows at all
    let out = lab(
        r#"{"model": {"lambda": 0.5}, "task": "sweep", "sweep": {"lambdas": [0.5, 0.25]},
            "verify": {"checks": ["low_energy_integral_reduced"], "ceiling": 0.01}}"#,
        dir.path(),
        &[],
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(read(dir.path(), "data/sweep.csv").contains(",false"));
}

#[test]
fn config_errors_exit_one_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab("{\"model\": {\"lambda\": 0.5},\n \"task\": \"solve\",\n \"bogus\": 1}", dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus") && err.contains("line 3"), "{err}");
    let out = lab(r#"{"model": {"lambda": 0.5}, "task": "sweep"}"#, dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sweep.lambdas"));
    let out = lab(r#"{"model": {"lambda": 0.5}, "task": "solve"}"#, dir.path(), &["--set", "model.lambda=2"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn overrides_and_solver_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(
        r#"{"model": {"lambda": 0.5}, "task": "estimate"}"#,
        dir.path(),
        &["--set", "task=solve", "--set", "model.lambda=0.25", "--seed", "9"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let residual: serde_json::Value = serde_json::from_str(&read(dir.path(), "reports/solver_residual.json")).unwrap();
    assert_eq!(residual["lambda"], 0.25);
    assert!(residual["residual"].as_f64().unwrap() <= 1e-8);
    assert!(read(dir.path(), "data/solution.csv").starts_with("payoff,p,weight,u\n"));
    let manifest: serde_json::Value = serde_json::from_str(&read(dir.path(), "manifest.json")).unwrap();
    assert_eq!(manifest["seed"], 9);
}
