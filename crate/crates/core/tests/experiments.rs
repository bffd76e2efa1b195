//! End-to-end runs of small configs through the experiment driver.

use hedgelab::experiments::run_file;
use std::path::Path;

const TOY: &str = r#"
kind = "toy_figure"
name = "tiny_toy"
seeds = [0, 1]

[features]
dims = 12
rules = [{ p = 0.25 }, { p = 0.25 }, { p = 0.25 }, { parent = 2, p_on = 0.2 }]

[sae]
widths = [3, 4]

[train]
batch_size = 64
total_samples = 6400
lr = 3e-3
l1_coeff = 1e-3
lr_decay_steps = 20
"#;

const HEDGING: &str = r#"
kind = "hedging_degree"
name = "tiny_hedging"
seeds = [3]

[features]
dims = 16
rules = [{ p = 0.2 }, { p = 0.2 }, { parent = 0, p_on = 0.3 }, { parent = 1, p_on = 0.3 }]

[sae]
widths = [2]

[train]
batch_size = 64
total_samples = 3200
lr = 3e-3
l1_coeff = 1e-3

[hedging]
n_new = 2
continue_samples = 1280
random_draws = 3
"#;

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn run_twice(text: &str) -> (Vec<(String, Vec<u8>)>, Vec<(String, Vec<u8>)>) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, text).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run_file(&cfg, Some(&a), None).status, 0);
    assert_eq!(run_file(&cfg, Some(&b), None).status, 0);
    assert!(a.join("manifest.json").exists());
    (csv_files(&a), csv_files(&b))
}

#[test]
fn toy_rerun_is_byte_identical() {
    let (a, b) = run_twice(TOY);
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    assert!(names.contains(&"metrics.csv") && names.contains(&"aggregate.csv"));
    assert!(names.iter().any(|n| n.ends_with("w3_alignment.csv")));
    assert_eq!(a, b);
}

#[test]
fn hedging_rerun_is_byte_identical() {
    let (a, b) = run_twice(HEDGING);
    let metrics = String::from_utf8(a.iter().find(|(n, _)| n == "metrics.csv").unwrap().1.clone()).unwrap();
    assert!(metrics.contains(",h,"));
    assert_eq!(a, b);
}

#[test]
fn invalid_config_exits_with_status_two_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    let out = dir.path().join("out");
    std::fs::write(&cfg, TOY.replace("widths = [3, 4]", "widths = [0]")).unwrap();
    let r = run_file(&cfg, Some(&out), None);
    assert_eq!(r.status, 2);
    assert!(r.error.is_some());
    assert!(!out.exists());

    std::fs::write(&cfg, TOY.replace("lr = 3e-3", "lr = 3e-3\nbogus = 1")).unwrap();
    assert_eq!(run_file(&cfg, Some(&out), None).status, 2);
    assert_eq!(run_file(&dir.path().join("missing.toml"), Some(&out), None).status, 2);
}

#[test]
fn seed_override_limits_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, TOY).unwrap();
    let r = run_file(&cfg, Some(&dir.path().join("o")), Some(vec![5]));
    assert_eq!(r.status, 0);
    assert_eq!(r.manifest.unwrap().seeds, vec![5]);
    assert!(r.metrics.iter().all(|m| m.seed == Some(5)));
}
