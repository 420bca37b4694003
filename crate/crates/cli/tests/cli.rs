use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quantsmooth"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = r#"{
  "model": {"d": 16, "s": 4, "f": 3, "n_blocks": 2, "heads": 2},
  "pool": 40,
  "eval_per_domain": 2,
  "clusters": 4,
  "budget": 8,
  "seeds": [0, 1],
  "calib": {"passes": 1}
}"#;

#[test]
fn usage_errors_exit_with_one() {
    let out = run(&["gen-pool", "--out", "x", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("E:1:"), "{err}");
    assert!(err.contains("Usage"), "{err}");
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["gen-pool", "--out", "x", "--scheme", "fancy"]).status.code(), Some(1));
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let out = run(&["score", "--pool", p(&missing), "--out", p(&dir.path().join("s.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("E:2:"));
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"pool": 400, "poll": 1}"#).unwrap();
    let out = run(&["gen-pool", "--config", p(&cfg), "--out", p(&dir.path().join("pool"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["gen-pool", "--bits", "w5a5", "--out", p(&dir.path().join("pool"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numeric_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("one.json");
    fs::write(&cfg, r#"{"model": {"d": 16, "s": 4, "f": 3, "n_blocks": 2, "heads": 2}, "pool": 1, "n_domains": 1}"#).unwrap();
    let pool = dir.path().join("pool");
    ok(&["gen-pool", "--config", p(&cfg), "--out", p(&pool)]);
    let out = run(&["score", "--pool", p(&pool), "--out", p(&dir.path().join("s.json"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("E:3:"));
}

#[test]
fn default_pool_selects_forty_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, "{}").unwrap();
    let pool = dir.path().join("pool");
    ok(&["gen-pool", "--config", p(&cfg), "--out", p(&pool)]);
    let manifest = read(&pool.join("manifest.json"));
    assert_eq!(manifest["scenes"].as_array().unwrap().len(), 400);
    assert_eq!(manifest["provenance"]["tool_version"], env!("CARGO_PKG_VERSION"));
    let scores = dir.path().join("scores.json");
    ok(&["score", "--pool", p(&pool), "--out", p(&scores)]);
    let calib = dir.path().join("calib.json");
    ok(&[
        "select", "--scores", p(&scores), "--keep", "0.2", "--clusters", "8", "--budget", "40", "--seed", "7",
        "--out", p(&calib),
    ]);
    let sel = read(&calib);
    let ids = sel["selected"].as_array().unwrap();
    assert_eq!(ids.len(), 40);
    assert_eq!(sel["seed"], 7);
    assert_eq!(sel["provenance"]["seed"], 7);
    assert_eq!(sel["assignments"].as_array().unwrap().len(), 80);
    let samples = read(&scores)["samples"].as_array().unwrap().clone();
    assert_eq!(samples.len(), 400);
    assert!(samples.windows(2).all(|w| w[0]["sample_id"].as_u64() < w[1]["sample_id"].as_u64()));
}

#[test]
fn pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    fs::write(&cfg, SMALL).unwrap();
    let go = |tag: &str| {
        let root = dir.path().join(tag);
        let pool = root.join("pool");
        let scores = root.join("scores.json");
        let calib = root.join("calib.json");
        let model = root.join("model");
        ok(&["gen-pool", "--config", p(&cfg), "--out", p(&pool)]);
        ok(&["score", "--pool", p(&pool), "--out", p(&scores)]);
        ok(&["select", "--scores", p(&scores), "--out", p(&calib)]);
        ok(&["calibrate", "--pool", p(&pool), "--calib", p(&calib), "--out", p(&model)]);
        ok(&["eval", "--model", p(&model), "--out", p(&root.join("eval.json"))]);
        ok(&["stats", "--pool", p(&pool), "--calib", p(&calib), "--out", p(&root.join("stats.json"))]);
        ok(&["ablate", "--pool", p(&pool), "--kind", "all", "--out", p(&root.join("ablate"))]);
        root
    };
    let a = go("a");
    let b = go("b");
    let files = [
        "pool/manifest.json",
        "pool/config.json",
        "scores.json",
        "calib.json",
        "model/model.qmdl",
        "model/model.json",
        "model/calibration_log.json",
        "eval.json",
        "stats.json",
        "ablate/report_schemes.json",
        "ablate/report_sampling.csv",
        "ablate/report_order.json",
        "ablate/report_granularity.csv",
    ];
    for f in files {
        let (x, y) = (fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        assert!(x == y, "{f} differs between runs");
    }
    for f in ["scores.json", "calib.json", "eval.json", "stats.json", "model/calibration_log.json"] {
        let v = read(&a.join(f));
        assert!(v["provenance"]["config_hash"].is_string(), "{f}");
        assert!(v["provenance"]["tool_version"].is_string(), "{f}");
    }
    let report = read(&a.join("ablate/report_sampling.json"));
    assert_eq!(report["arms"].as_array().unwrap().len(), 4);
    let csv = fs::read_to_string(a.join("ablate/report_sampling.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 2);
    let eval = read(&a.join("eval.json"));
    assert!(eval["model_quant_loss"].as_f64().unwrap() > 0.0);
    assert_eq!(eval["bits"], "w4a4");
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    fs::write(&cfg, SMALL).unwrap();
    let pool = dir.path().join("pool");
    ok(&["gen-pool", "--config", p(&cfg), "--out", p(&pool)]);
    let model = dir.path().join("model");
    ok(&[
        "calibrate", "--pool", p(&pool), "--bits", "w8a8", "--scheme", "naive", "--seed", "3", "--no-search",
        "--out", p(&model),
    ]);
    let rec = read(&model.join("config.json"));
    assert_eq!(rec["config"]["bits"], "w8a8");
    assert_eq!(rec["config"]["scheme"], "naive");
    assert_eq!(rec["config"]["seeds"], serde_json::json!([3]));
    assert_eq!(rec["config"]["budget"], 8);
    let eval = dir.path().join("eval.json");
    ok(&["eval", "--model", p(&model), "--out", p(&eval)]);
    assert_eq!(read(&eval)["scheme"], "naive");
}
