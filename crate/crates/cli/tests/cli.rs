//! Drives the `hedgelab` binary through its subcommands.

use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
kind = "toy_figure"
name = "cli_toy"
seeds = [0]

[features]
dims = 12
rules = [{ p = 0.3 }, { p = 0.3 }, { parent = 0, p_on = 0.3 }]

[sae]
widths = [2]

[train]
batch_size = 64
total_samples = 3200
lr = 3e-3
l1_coeff = 1e-3
"#;

fn hedgelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hedgelab")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hedgelab(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn stream_train_extend_and_hedging_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("toy.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let stream = d.join("acts.bin");
    let ckpt = d.join("base.saec");
    let ext = d.join("ext.saec");

    ok(&["gen-stream", "--config", s(&cfg), "--seed", "1", "--out", s(&stream), "--samples", "4000"]);
    assert_eq!(std::fs::metadata(&stream).unwrap().len(), 20 + 4000 * 12 * 4);

    ok(&["train", "--config", s(&cfg), "--seed", "1", "--out", s(&ckpt), "--stream", s(&stream)]);
    assert!(ckpt.exists());
    assert!(d.join("base.log.csv").exists());

    let header: serde_json::Value = serde_json::from_str(&ok(&["inspect", s(&ckpt)])).unwrap();
    assert_eq!(header["dims"], 12);
    assert_eq!(header["width"], 2);

    ok(&["extend", "--checkpoint", s(&ckpt), "--n-new", "2", "--seed", "3", "--out", s(&ext)]);
    let header: serde_json::Value = serde_json::from_str(&ok(&["inspect", s(&ext)])).unwrap();
    assert_eq!(header["width"], 4);

    let stdout = ok(&["hedging-degree", "--base", s(&ckpt), "--extended", s(&ext), "--draws", "3"]);
    assert!(stdout.contains("h = 0"), "untrained extension must give h = 0, got {stdout}");

    let pair = d.join("pair");
    ok(&[
        "continue-pair", "--config", s(&cfg), "--seed", "1", "--out", s(&pair), "--checkpoint", s(&ckpt),
        "--n-new", "2", "--samples", "640", "--stream", s(&stream), "--offset", "3200",
    ]);
    assert!(pair.join("base.saec").exists() && pair.join("extended.saec").exists());
    let hedge_dir = d.join("hedge");
    let stdout = ok(&[
        "hedging-degree", "--base", s(&pair.join("base.saec")), "--extended", s(&pair.join("extended.saec")),
        "--out", s(&hedge_dir),
    ]);
    assert!(stdout.starts_with("h = "));
    assert!(hedge_dir.join("hedging.csv").exists());

    let analysis = d.join("analysis");
    ok(&["analyze", "--config", s(&cfg), "--seed", "1", "--out", s(&analysis), "--checkpoint", s(&ckpt)]);
    assert!(analysis.join("alignment.csv").exists() && analysis.join("bias.csv").exists());
}

#[test]
fn loss_curve_writes_csv_and_argmin() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("curve.csv");
    let stdout = ok(&["loss-curve", "--p-alone", "0.3", "--p-both", "0.1", "--steps", "100", "--out", s(&out)]);
    assert!(stdout.contains("argmin alpha = "));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 102);
}

#[test]
fn run_reports_invalid_config_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, CONFIG.replace("widths = [2]", "widths = []")).unwrap();
    let out = hedgelab(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("o");
    ok(&["--threads", "1", "run", "--config", s(&cfg), "--out", s(&out), "--seed", "2,3"]);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"], serde_json::json!([2, 3]));
    assert!(out.join("metrics.csv").exists());
}

#[test]
fn missing_checkpoint_fails_cleanly() {
    let out = hedgelab(&["inspect", "/nonexistent/x.saec"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}
