use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn voxseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxseg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = voxseg(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

/// Asserts a failure with a single `error: <kind>: ...` line.
fn fails(args: &[&str], code: i32, kind: &str) -> String {
    let o = voxseg(args);
    assert_eq!(o.status.code(), Some(code), "{args:?}");
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error: {kind}: ")), "{err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let summary = ok(&["phantom-gen", "--seed", "1", "--count", "4", "--dims", "24x24x11", "--out", s(&data), "--val", "1", "--test", "1"]);
    assert!(summary.contains("\"count\""), "{summary}");
    let manifest = data.join("manifest.jsonl");
    assert_eq!(fs::read_to_string(&manifest).unwrap().lines().count(), 4);

    let aug = dir.path().join("aug");
    ok(&["augment", "--manifest", s(&manifest), "--multiplicity", "3", "--seed", "5", "--out", s(&aug), "--dims", "16x16x9"]);
    assert_eq!(fs::read_to_string(aug.join("manifest.jsonl")).unwrap().lines().count(), 6);
    assert_eq!(fs::read_to_string(aug.join("augment_log.jsonl")).unwrap().lines().count(), 6);

    let run = dir.path().join("run");
    let cfg = dir.path().join("run.json");
    let config = serde_json::json!({
        "variant": "M3",
        "model": voxseg::ModelConfig::m3(4).with_input([16, 16, 9]),
        "epochs": 2,
        "iterations_per_epoch": 3,
        "eval_interval": 1,
        "manifest": manifest,
        "output_dir": run,
    });
    fs::write(&cfg, config.to_string()).unwrap();
    let out = ok(&["train", "--config", s(&cfg), "--deterministic"]);
    assert_eq!(out.lines().count(), 1);
    let metrics = fs::read_to_string(run.join("metrics_validation.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let smoothed = dir.path().join("smooth.csv");
    ok(&["smooth", "--in", s(&run.join("metrics_validation.csv")), "--out", s(&smoothed), "--window", "2"]);
    assert_eq!(fs::read_to_string(&smoothed).unwrap().lines().count(), 2);

    let pred = dir.path().join("pred");
    ok(&["predict", "--checkpoint", s(&run.join("latest.ckpt")), "--input", s(&data.join("phantom_003")), "--out", s(&pred)]);
    let full = dir.path().join("pred_full");
    assert!(full.with_extension("json").exists() && pred.with_extension("raw").exists());

    let gt = data.join("phantom_003_mask");
    let csv = ok(&["evaluate", "--pred", s(&full), "--gt", s(&gt), s(&gt), "--dims", "24x24x11"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("label,"));
    assert!(lines[3].starts_with("averaged,"));

    let self_csv = ok(&["evaluate", "--pred", s(&gt), "--gt", s(&gt), "--dims", "24x24x11"]);
    let jaccard: f64 = self_csv.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(jaccard, 1.0);

    fails(&["evaluate", "--pred", s(&pred), "--gt", s(&gt), "--dims", "20x24x11"], 1, "shape");
}

#[test]
fn gradcheck_primitives() {
    let out = ok(&["gradcheck", "--primitives-only", "--seeds", "2"]);
    assert_eq!(out.lines().filter(|l| l.ends_with("ok")).count(), 12, "{out}");
    let out = ok(&["gradcheck", "--f64", "--primitives-only", "--seeds", "1"]);
    assert!(out.lines().all(|l| !l.ends_with("FAIL")), "{out}");
}

#[test]
fn errors_are_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    fails(&["train", "--config", s(&missing)], 1, "io");
    fails(&["phantom-gen", "--seed", "1", "--count", "2", "--dims", "4x4", "--out", "x"], 2, "usage");
    fails(&["smooth", "--out", "x"], 2, "usage");
    fails(&["frobnicate"], 2, "usage");

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "epoch,jaccard\n1,0.5\n2,x\n").unwrap();
    let err = fails(&["smooth", "--in", s(&bad), "--out", s(&dir.path().join("o.csv"))], 1, "parse");
    assert!(err.contains(":3:"), "{err}");

    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"variant":"M3","epochs":0,"manifest":"m","output_dir":"o"}"#).unwrap();
    fails(&["train", "--config", s(&cfg)], 1, "config");
}

#[test]
fn help_exits_zero() {
    let out = ok(&["--help"]);
    for cmd in ["phantom-gen", "augment", "train", "predict", "evaluate", "gradcheck", "smooth"] {
        assert!(out.contains(cmd), "{cmd}");
    }
}
