use std::path::Path;
use std::process::{Command, Output};

use sfa_core::checkpoint::Checkpoint;
use sfa_core::trainer::RunReport;

fn sfa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfa")).args(args).output().expect("spawn sfa")
}

fn pretrained(dir: &Path) -> String {
    let out = dir.join("pre");
    let o = sfa(&["pretrain", "--steps", "3", "--batch-size", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("checkpoint.sfa").to_str().unwrap().to_string()
}

#[test]
fn selftest_exits_zero_and_prints_errors() {
    let o = sfa(&["selftest", "--draws", "3"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}\n{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout.contains("max_rel_error"));
    assert!(stdout.contains("matmul"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn bad_usage_exits_two() {
    assert_eq!(sfa(&["adapt", "--beta"]).status.code(), Some(2));
    assert_eq!(sfa(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(sfa(&["sweep", "sideways", "--checkpoint", "x"]).status.code(), Some(2));
}

#[test]
fn run_failure_exits_one_with_diagnostic() {
    let o = sfa(&["adapt", "--checkpoint", "/nonexistent/checkpoint.sfa"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("sfa: "));
}

#[test]
fn zero_budget_without_adapters_is_frozen() {
    let dir = tempfile::tempdir().unwrap();
    let ck = pretrained(dir.path());
    let out = dir.path().join("frozen");
    let o = sfa(&[
        "adapt", "--checkpoint", &ck, "--beta", "0", "--no-adapters", "--steps", "3", "--batch-size", "2", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: RunReport = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.method, "frozen");
    assert_eq!(report.counts.backbone_side(), 0);
}

#[test]
fn adapt_then_eval_delta_and_transfer_mask() {
    let dir = tempfile::tempdir().unwrap();
    let ck = pretrained(dir.path());
    let out = dir.path().join("adapt");
    let o = sfa(&[
        "adapt", "--checkpoint", &ck, "--steps", "4", "--step-size", "2", "--batch-size", "2", "--save-checkpoint",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let delta = out.join("delta.sfad");
    let full = Checkpoint::load(&out.join("checkpoint.sfa")).unwrap();
    let base = Checkpoint::load(Path::new(&ck)).unwrap();
    let rebuilt =
        sfa_core::delta::apply_delta(&base, &sfa_core::delta::SparseDelta::load(&delta).unwrap()).unwrap();
    assert!(rebuilt.store.bit_eq(&full.store));

    let o = sfa(&["eval", "--checkpoint", &ck, "--delta", delta.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(line["miou"].as_f64().is_some());

    let tout = dir.path().join("transfer");
    let o = sfa(&[
        "transfer-mask", "--checkpoint", &ck, "--mask", out.join("mask.json").to_str().unwrap(), "--steps", "2",
        "--batch-size", "2", "--out", tout.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = std::fs::read_to_string(out.join("mask.json")).unwrap();
    let b = std::fs::read_to_string(tout.join("mask.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn budget_sweep_emits_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let ck = pretrained(dir.path());
    let out = dir.path().join("sweep");
    let o = sfa(&["sweep", "budget", "--checkpoint", &ck, "--steps", "2", "--batch-size", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("budget.csv")).unwrap();
    let betas: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(betas, [0.01, 0.02, 0.05, 0.10, 0.15, 0.20]);

    let summary = dir.path().join("summary");
    let o = sfa(&["report", out.to_str().unwrap(), "--out", summary.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(summary.join("budget.csv")).unwrap(), csv);
}

#[test]
fn config_file_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"stepz": 3}}"#).unwrap();
    let o = sfa(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
