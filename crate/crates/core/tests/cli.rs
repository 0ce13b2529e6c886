use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn comuco(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_comuco"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn json_stdout(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn synthetic(dir: &Path) {
    std::fs::write(
        dir.join("spec.json"),
        r#"{"C": 4, "d": 8, "n_train": 6, "n_test": 10, "alignment": 0.9, "noise_sigma": 0.2, "seed": 5}"#,
    )
    .unwrap();
    let out = comuco(
        &["gen-synthetic", "--spec", "spec.json", "--out", "task"],
        dir,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in ["manifest.json", "features.cmf", "text.cmf"] {
        assert!(dir.join("task").join(f).exists(), "{f} missing");
    }
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synthetic(d);
    std::fs::write(d.join("cfg.json"), r#"{"epochs": 3}"#).unwrap();

    let out = comuco(
        &[
            "train",
            "--manifest",
            "task/manifest.json",
            "--k",
            "2",
            "--seed",
            "1",
            "--config",
            "cfg.json",
            "--out",
            "run",
        ],
        d,
    );
    let summary = json_stdout(&out);
    assert_eq!(summary["epochs"], 3);
    let history = std::fs::read_to_string(d.join("run/history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 3);

    let eval = json_stdout(&comuco(
        &[
            "eval",
            "--manifest",
            "task/manifest.json",
            "--params",
            "run/params.cmf",
            "--config",
            "cfg.json",
        ],
        d,
    ));
    assert_eq!(eval["accuracy"], summary["final_accuracy"]);
    assert_eq!(eval["test_rows"], 40);

    let identity = json_stdout(&comuco(&["eval", "--manifest", "task/manifest.json"], d));
    assert_eq!(identity["accuracy"], identity["zero_shot_accuracy"]);
}

#[test]
fn ablate_and_export_formats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synthetic(d);
    std::fs::write(d.join("cfg.json"), r#"{"epochs": 2}"#).unwrap();
    let out = comuco(
        &[
            "ablate",
            "--manifest",
            "task/manifest.json",
            "--k",
            "1",
            "--seeds",
            "0,1",
            "--config",
            "cfg.json",
            "--out",
            "abl.json",
        ],
        d,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("abl.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 9);

    let csv = comuco(
        &["export-report", "--format", "csv", "--input", "abl.json"],
        d,
    );
    assert!(csv.status.success());
    let csv = String::from_utf8(csv.stdout).unwrap();
    assert!(csv.starts_with("config_id,k,seed,accuracy\n"));
    let md = comuco(
        &["export-report", "--format", "md", "--input", "abl.json"],
        d,
    );
    assert!(String::from_utf8(md.stdout).unwrap().contains("| full |"));
}

#[test]
fn sweep_writes_one_row_per_shot_count() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synthetic(d);
    std::fs::write(d.join("cfg.json"), r#"{"epochs": 2}"#).unwrap();
    let out = comuco(
        &[
            "sweep",
            "--manifest",
            "task/manifest.json",
            "--shots",
            "1,2,4",
            "--seeds",
            "0",
            "--config",
            "cfg.json",
        ],
        d,
    );
    let report = json_stdout(&out);
    let ids: Vec<&str> = report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["config_id"].as_str().unwrap())
        .collect();
    assert_eq!(ids, ["K=1", "K=2", "K=4"]);
}

#[test]
fn verify_geometry_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = comuco(
        &["verify-geometry", "--trials", "5", "--out", "v.json"],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 5);
    assert!(dir.path().join("v.json").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(comuco(&["--help"], d).status.code(), Some(0));
    assert_eq!(comuco(&["train"], d).status.code(), Some(1));
    assert_eq!(
        comuco(&["eval", "--manifest", "missing.json"], d)
            .status
            .code(),
        Some(1)
    );

    synthetic(d);
    let too_many = comuco(
        &[
            "train",
            "--manifest",
            "task/manifest.json",
            "--k",
            "7",
            "--out",
            "run",
        ],
        d,
    );
    assert_eq!(too_many.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&too_many.stderr).contains("class"));

    std::fs::write(d.join("bad.json"), r#"{"alpha": 0.8, "beta": 0.5}"#).unwrap();
    let bad = comuco(
        &[
            "eval",
            "--manifest",
            "task/manifest.json",
            "--config",
            "bad.json",
        ],
        d,
    );
    assert_eq!(bad.status.code(), Some(1));
    std::fs::write(d.join("typo.json"), r#"{"alhpa": 0.1}"#).unwrap();
    let typo = comuco(
        &[
            "eval",
            "--manifest",
            "task/manifest.json",
            "--config",
            "typo.json",
        ],
        d,
    );
    assert_eq!(typo.status.code(), Some(1));

    // NaN in the feature file
    let mut bytes = std::fs::read(d.join("task/features.cmf")).unwrap();
    bytes[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(d.join("task/features.cmf"), bytes).unwrap();
    let nan = comuco(&["eval", "--manifest", "task/manifest.json"], d);
    assert_eq!(nan.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&nan.stderr).contains("row 0"));
}
