use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_melvin-surrogate"))
        .args(args)
        .output()
        .expect("spawn")
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn dir(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("melvin-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    d
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset plus both models.
fn trained(name: &str) -> PathBuf {
    let d = dir(name);
    ok(&["generate", "--count", "600", "--seed", "3", "--out", s(&d)]);
    let data = d.join("dataset.jsonl");
    for task in ["ent", "srv"] {
        ok(&[
            "train",
            "--dataset",
            s(&data),
            "--task",
            task,
            "--hidden",
            "8",
            "--embed",
            "4",
            "--max-updates",
            "20",
            "--out",
            s(&d),
        ]);
    }
    d
}

#[test]
fn generate_writes_dataset_stats_and_config() {
    let d = dir("gen");
    let stdout = ok(&[
        "generate",
        "--count",
        "200",
        "--seed",
        "1",
        "--test-fraction",
        "0.3",
        "--out",
        s(&d),
    ]);
    assert!(stdout.starts_with("200 records"));
    let lines = std::fs::read_to_string(d.join("dataset.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 200);
    let stats = std::fs::read_to_string(d.join("stats.csv")).unwrap();
    assert!(stats.starts_with("fold_rank,positives,negatives\n"));
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("generate.config.json")).unwrap()).unwrap();
    assert_eq!(cfg["config"]["test_fraction"], 0.3);
    assert_eq!(cfg["config"]["seed"], 1);
    std::fs::remove_dir_all(&d).unwrap();
}

#[test]
fn evaluate_modes_emit_expected_rows() {
    let d = trained("eval");
    let data = d.join("dataset.jsonl");
    let (ent, srv) = (d.join("model_ent.ckpt"), d.join("model_srv.ckpt"));
    let models = ["--ent-model", s(&ent), "--srv-model", s(&srv)];

    let test_out = d.join("test");
    let mut args = vec![
        "evaluate",
        "--dataset",
        s(&data),
        "--mode",
        "test",
        "--out",
        s(&test_out),
    ];
    args.extend(models);
    ok(&args);
    let metrics = std::fs::read_to_string(test_out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(metrics.lines().nth(1).unwrap().starts_with("test,0.5,3,"));

    let sweep_out = d.join("sweep");
    let mut args = vec!["sweep", "--dataset", s(&data), "--out", s(&sweep_out)];
    args.extend(models);
    ok(&args);
    let sweep = std::fs::read_to_string(sweep_out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 101 * 66);
    let ap = std::fs::read_to_string(sweep_out.join("average_precision.csv")).unwrap();
    assert_eq!(ap.lines().count(), 1 + 66 + 1);
    std::fs::remove_dir_all(&d).unwrap();
}

#[test]
fn ccv_mode_reports_every_fold() {
    let d = dir("ccv");
    ok(&["generate", "--count", "3000", "--seed", "5", "--out", s(&d)]);
    let stats = std::fs::read_to_string(d.join("stats.csv")).unwrap();
    let folds: Vec<String> = stats
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').next()?.parse::<u32>().ok())
        .filter(|&r| (2..=8).contains(&r))
        .map(|r| r.to_string())
        .collect();
    let fold_arg = format!("0,1,{}", folds.join(","));
    let out = d.join("ccv");
    ok(&[
        "evaluate",
        "--dataset",
        s(&d.join("dataset.jsonl")),
        "--mode",
        "ccv",
        "--folds",
        &fold_arg,
        "--hidden",
        "4",
        "--embed",
        "3",
        "--max-updates",
        "4",
        "--batch",
        "16",
        "--out",
        s(&out),
    ]);
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let names: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    // each fold, the merged low-rank row, and the extrapolation row
    assert_eq!(names.len(), 2 + folds.len() + 2);
    assert_eq!(names.last(), Some(&"extrapolation"));
    assert!(std::fs::read_to_string(out.join("summary.txt"))
        .unwrap()
        .contains("0+1"));
    std::fs::remove_dir_all(&d).unwrap();
}

#[test]
fn mismatched_checkpoint_and_bad_flags_fail() {
    let d = trained("bad");
    let data = d.join("dataset.jsonl");
    // srv checkpoint passed as the entanglement model
    let srv = d.join("model_srv.ckpt");
    let out = bin(&[
        "evaluate",
        "--dataset",
        s(&data),
        "--ent-model",
        s(&srv),
        "--srv-model",
        s(&srv),
        "--out",
        s(&d),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(
        bin(&["train", "--dataset", s(&data), "--task", "nope"]).status.code(),
        Some(2)
    );
    std::fs::remove_dir_all(&d).unwrap();
}

#[test]
fn dump_state_prints_label() {
    let stdout = ok(&["dump-state", "--setup", "BS(a,b) HOLO(a,+1) BS(c,d)"]);
    assert!(stdout.contains("output:"));
    assert!(stdout.contains("label:"));
    assert!(!bin(&["dump-state", "--setup", "XX(a)"]).status.success());
}
