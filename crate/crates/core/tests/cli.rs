use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_augmentor"))
        .args(args)
        .env("RUST_LOG", "error")
        .env_remove("AUGMENTOR_API_URL")
        .env_remove("AUGMENTOR_API_KEY")
        .output()
        .unwrap()
}

fn summary(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["sweep", "--help"]).status.code(), Some(0));
    assert_eq!(run(&["bogus"]).status.code(), Some(1));
    assert_eq!(
        run(&["augment", "--increment", "many"]).status.code(),
        Some(1)
    );
    assert_eq!(run(&[]).status.code(), Some(1));
}

#[test]
fn missing_inputs_are_precondition_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b.json");
    let r = run(&["train-baseline", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    let v = summary(&r);
    assert_eq!(v["status"], "error");
    assert!(v["error"].as_str().unwrap().contains("corpus"));

    let r = run(&[
        "train-baseline",
        "--corpus",
        "/nonexistent/c.jsonl",
        "--out",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn fixture_miss_is_external_failure() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixtures();
    let r = run(&[
        "generate",
        "--pos",
        s(&f.join("templates/positive.json")),
        "--neg",
        s(&f.join("templates/negative.json")),
        "--temperature",
        "0.9",
        "--per-label",
        "10",
        "--fixtures",
        s(&f.join("llm")),
        "--out",
        s(&dir.path().join("p.jsonl")),
    ]);
    assert_eq!(r.status.code(), Some(3));
    assert!(summary(&r)["error"].as_str().unwrap().contains("fixture"));
}

#[test]
fn live_without_endpoint_is_external_failure() {
    let dir = tempfile::tempdir().unwrap();
    let pool = dir.path().join("p.jsonl");
    fs::write(
        &pool,
        "{\"id\":\"a\",\"text\":\"hello\",\"label\":1,\"source\":\"synthetic\",\"temperature\":0.5}\n",
    )
    .unwrap();
    let r = run(&[
        "grade",
        "--pool",
        s(&pool),
        "--live",
        "--out",
        s(&dir.path().join("r.jsonl")),
    ]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn sweep_rejects_adapter() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&[
        "sweep",
        "--corpus",
        s(&fixtures().join("corpus.jsonl")),
        "--pools-dir",
        s(dir.path()),
        "--adapter",
        "anything",
        "--out",
        s(&dir.path().join("s.csv")),
    ]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn baseline_summary_and_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("baseline.json");
    let cfg = dir.path().join("run.json");
    fs::write(
        &cfg,
        serde_json::json!({
            "seed": 5,
            "paths": { "corpus": fixtures().join("corpus.jsonl"), "out": out },
            "bootstrap": { "n_resamples": 200 }
        })
        .to_string(),
    )
    .unwrap();
    let r = run(&["--config", s(&cfg), "train-baseline"]);
    assert_eq!(
        r.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&r.stderr)
    );
    let v = summary(&r);
    assert_eq!(v["cmd"], "train-baseline");
    assert_eq!(v["status"], "ok");
    assert_eq!(v["seed"], 5);
    assert_eq!(v["outputs"][0], s(&out));
    let report: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    let auc = report["baseline"]["auc"].as_f64().unwrap();
    assert!(auc > 0.5 && auc <= 1.0);
    assert_eq!(report["human_train"], 51);
    assert_eq!(report["validation"], 256);
    let phases = report["per_phase"].as_object().unwrap();
    assert_eq!(phases.len(), 2);
    assert!(phases.contains_key("predict") && phases.contains_key("explain"));
}

#[test]
fn report_converts_between_formats() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixtures();
    let pool = dir.path().join("p.jsonl");
    let gen = run(&[
        "generate",
        "--pos",
        s(&f.join("templates/positive.json")),
        "--neg",
        s(&f.join("templates/negative.json")),
        "--temperature",
        "0.3",
        "--per-label",
        "130",
        "--fixtures",
        s(&f.join("llm")),
        "--out",
        s(&pool),
    ]);
    assert_eq!(gen.status.code(), Some(0));
    let csv = dir.path().join("curve.csv");
    let aug = run(&[
        "augment",
        "--corpus",
        s(&f.join("corpus.jsonl")),
        "--pool",
        s(&pool),
        "--increment",
        "100",
        "--max-synthetic",
        "200",
        "--resamples",
        "100",
        "--out",
        s(&csv),
    ]);
    assert_eq!(
        aug.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&aug.stderr)
    );
    assert!(dir.path().join("curve.csv.meta.json").exists());
    let json = dir.path().join("curve.json");
    assert_eq!(
        run(&["report", "--input", s(&csv), "--out", s(&json)])
            .status
            .code(),
        Some(0)
    );
    let v: Value = serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[0]["temperature"].is_null());
    assert_eq!(rows[2]["synthetic_count"], 200);
}
