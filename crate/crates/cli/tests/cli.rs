use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn prunelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prunelab"))
        .args(args)
        .env("PRUNELAB_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    let cfg = serde_json::json!({
        "N": 40, "M": 2, "K": 4, "v_star": 2.0,
        "train_steps": 60000, "test_samples": 2000, "rounds": 2,
        "masks_per_round": 4, "k_n_grid": [1, 2], "probe_samples": 400,
        "kernel_samples": 200, "ge_log_interval": 5000, "seed": 3
    });
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn theory_grid_csv_and_domain_guard() {
    let o = prunelab(&["theory-grid", "--m", "2", "--z-max", "6", "--resolution", "10"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.starts_with("Z,c,diff\n4,0,0\n"));
    assert!(text.lines().skip(1).all(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap() >= 0.0));

    let o = prunelab(&["theory-grid", "--reweighted", "--z-max", "6", "--resolution", "10"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).lines().skip(1).all(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap() <= 0.0));

    assert_eq!(prunelab(&["theory-grid", "--z-min", "3"]).status.code(), Some(2));
    assert_eq!(prunelab(&["theory-grid", "--z-min", "9", "--z-max", "5"]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(prunelab(&["experiment", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(prunelab(&["experiment", "--methods", "best_node"]).status.code(), Some(2));
    assert_eq!(prunelab(&["experiment", "--format", "xml"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"N": 10, "unknown_field": 1}"#).unwrap();
    assert_eq!(prunelab(&["experiment", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    let missing = dir.path().join("missing.json");
    assert_eq!(prunelab(&["experiment", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
    let odd = dir.path().join("odd.json");
    fs::write(&odd, r#"{"M": 4, "K": 6}"#).unwrap();
    assert_eq!(prunelab(&["train", "--config", odd.to_str().unwrap(), "--out", "x.json"]).status.code(), Some(2));
}

#[test]
fn train_then_prune() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let net = dir.path().join("net.json");
    let o = prunelab(&["train", "--config", cfg.to_str().unwrap(), "--out", net.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let trained: Value = serde_json::from_str(&fs::read_to_string(&net).unwrap()).unwrap();
    assert_eq!(trained["round"], 0);

    let o = prunelab(&[
        "prune", "--config", cfg.to_str().unwrap(), "--input", net.to_str().unwrap(),
        "--methods", "dpp_node,imp_edge", "--k-n", "1,3", "--reweight",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("method,pct_params,round,ge_mean,ge_std,reweighted,seed"));
    // Two methods, two budgets, plain and reweighted.
    assert_eq!(lines.count(), 8);
    assert!(text.contains("dpp_node,75.0,0,"));
}

#[test]
fn experiment_json_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = prunelab(&[
            "experiment", "--config", cfg.to_str().unwrap(), "--format", "json", "--seed", "11",
            "--edge-mode", "exact", "--out", out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(out).unwrap()
    };
    let a = run("a.json");
    assert_eq!(a, run("b.json"));
    let records: Vec<Value> = serde_json::from_str(&a).unwrap();
    let summary = records.iter().filter(|r| r["round"].is_null()).count();
    assert_eq!(summary, 5 * 2);
    assert_eq!(records.len(), summary * 3);
    assert!(records.iter().all(|r| r["seed"].as_u64().is_some() && r["ge_mean"].as_f64().unwrap() >= 0.0));
}

#[test]
fn verify_and_table_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let report = dir.path().join("report.json");
    let o = prunelab(&["verify", "--quick", "--config", cfg.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    // The tiny setting cannot meet the baseline and table criteria.
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stdout(&o).lines().count(), 13);
    let parsed: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let checks = parsed["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 13);
    assert!(checks.iter().all(|c| c["measured"].is_object() || c["measured"].is_array() || c["status"] != "pass"));
    assert_eq!(checks[7]["status"], "skipped");

    let o = prunelab(&["reproduce-table", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
