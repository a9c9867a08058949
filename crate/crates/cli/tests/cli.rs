use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_selfablate"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn selfablate")
}

fn ok_json(dir: &Path, args: &[&str]) -> Value {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON object")
}

const CONFIG: &str = r#"{
  "model": {"d_model": 16, "n_layers": 2, "n_heads": 2, "d_mlp": 32, "max_pos": 96,
            "ablation_mode": "local", "k_attn": 1, "k_mlp": 4, "seed": 1},
  "train": {"total_steps": 6, "seq_len": 48, "batch_size": 2, "eval_interval": 2,
            "checkpoint_interval": 3},
  "paths": {"corpus": "corpus.txt"}
}"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok_json(
        dir.path(),
        &[
            "gen-corpus",
            "--out",
            "corpus.txt",
            "--bytes",
            "20000",
            "--seed",
            "3",
        ],
    );
    std::fs::write(dir.path().join("cfg.json"), CONFIG).unwrap();
    dir
}

fn metric_steps(path: &Path) -> Vec<u64> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["step"]
                .as_u64()
                .unwrap()
        })
        .collect()
}

#[test]
fn train_writes_artifacts_and_resume_continues() {
    let dir = setup();
    let d = dir.path();
    let summary = ok_json(d, &["train", "--config", "cfg.json", "--out", "run"]);
    assert_eq!(summary["steps"], 6);
    for f in ["final.sabt", "metrics.jsonl", "manifest.json", "step-3.sabt"] {
        assert!(d.join("run").join(f).exists(), "missing {f}");
    }
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"]["model"], 1);
    assert_eq!(manifest["corpus"]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(metric_steps(&d.join("run/metrics.jsonl")), [2, 4, 6]);

    let resumed = ok_json(
        d,
        &[
            "train",
            "--config",
            "cfg.json",
            "--out",
            "resumed",
            "--resume",
            "run/step-3.sabt",
        ],
    );
    assert_eq!(resumed["steps"], 6);
    assert_eq!(metric_steps(&d.join("resumed/metrics.jsonl")), [4, 6]);
    assert_eq!(resumed["last"], summary["last"]);
}

#[test]
fn config_errors_exit_two_and_name_the_key() {
    let dir = setup();
    let d = dir.path();
    let broken = CONFIG.replace("\"d_model\": 16, ", "");
    std::fs::write(d.join("bad.json"), broken).unwrap();
    let out = run(d, &["train", "--config", "bad.json", "--out", "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.d_model"));

    let unknown = CONFIG.replace("\"eval_interval\"", "\"eval_intervall\"");
    std::fs::write(d.join("typo.json"), unknown).unwrap();
    let out = run(d, &["train", "--config", "typo.json", "--out", "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train"));

    assert_eq!(run(d, &["train", "--out", "run"]).status.code(), Some(2));
    assert_eq!(
        run(d, &["eval", "--ckpt", "nope.sabt", "--data", "corpus.txt"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn export_preserves_perplexity() {
    let dir = setup();
    let d = dir.path();
    ok_json(d, &["train", "--config", "cfg.json", "--out", "run"]);
    let exported = ok_json(d, &["export", "--ckpt", "run/final.sabt", "--out", "plain.sabt"]);
    let eval = |ckpt: &str| {
        ok_json(
            d,
            &[
                "eval",
                "--ckpt",
                ckpt,
                "--data",
                "corpus.txt",
                "--seq-len",
                "48",
                "--max-windows",
                "8",
            ],
        )["perplexity"]
            .as_f64()
            .unwrap()
    };
    let (a, b) = (eval("run/final.sabt"), eval("plain.sabt"));
    assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    let m = ok_json(
        d,
        &[
            "metrics",
            "--ckpt",
            "plain.sabt",
            "--data",
            "corpus.txt",
            "--seq-len",
            "48",
        ],
    );
    assert_eq!(m["parameters"], exported["parameters"]);
    assert!(m["weight_l1"].as_f64().unwrap() > 0.0);
}

#[test]
fn ioi_generation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok_json(d, &["ioi-gen", "--n", "8", "--seed", "7", "--out", "a.json"]);
    ok_json(d, &["ioi-gen", "--n", "8", "--seed", "7", "--out", "b.json"]);
    let a = std::fs::read(d.join("a.json")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.json")).unwrap());
    let prompts: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(prompts.as_array().unwrap().len(), 8);
}

#[test]
fn circuit_reports_tau_and_edge_count() {
    let dir = setup();
    let d = dir.path();
    ok_json(d, &["train", "--config", "cfg.json", "--out", "run"]);
    ok_json(d, &["ioi-gen", "--n", "4", "--seed", "1", "--out", "p.json"]);
    let s = ok_json(
        d,
        &[
            "circuit",
            "--ckpt",
            "run/final.sabt",
            "--prompts",
            "p.json",
            "--tau",
            "0.03",
            "--out",
            "c.json",
        ],
    );
    assert_eq!(s["tau"], 0.03);
    let graph: Value = serde_json::from_str(&std::fs::read_to_string(d.join("c.json")).unwrap()).unwrap();
    assert_eq!(graph["edge_count"], s["edge_count"]);
    assert_eq!(graph["tau"], 0.03);
    assert!(std::fs::read_to_string(d.join("c.dot"))
        .unwrap()
        .starts_with("digraph"));
    let out = run(
        d,
        &[
            "circuit",
            "--ckpt",
            "run/final.sabt",
            "--prompts",
            "p.json",
            "--tau",
            "-1",
            "--out",
            "x.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn record_then_sae() {
    let dir = setup();
    let d = dir.path();
    ok_json(d, &["train", "--config", "cfg.json", "--out", "run"]);
    let rec = ok_json(
        d,
        &[
            "record",
            "--ckpt",
            "run/final.sabt",
            "--data",
            "corpus.txt",
            "--seq-len",
            "48",
            "--out",
            "rec.sabt",
        ],
    );
    assert_eq!(rec["layer"], 0);
    assert_eq!(rec["dim"], 16);
    let sae = ok_json(
        d,
        &[
            "sae",
            "train",
            "--record",
            "rec.sabt",
            "--out",
            "sae.sabt",
            "--steps",
            "5",
            "--log",
            "sae.jsonl",
        ],
    );
    assert_eq!(sae["d_dict"], 256);
    assert_eq!(
        std::fs::read_to_string(d.join("sae.jsonl"))
            .unwrap()
            .lines()
            .count(),
        5
    );
    let ev = ok_json(
        d,
        &[
            "sae",
            "eval",
            "--ckpt",
            "run/final.sabt",
            "--sae",
            "sae.sabt",
            "--data",
            "corpus.txt",
            "--seq-len",
            "48",
            "--max-windows",
            "4",
        ],
    );
    let score = ev["ce_score"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&score));
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .current_dir(dir.path())
        .env("SA_THREADS", "zero")
        .args(["ioi-gen", "--n", "1", "--out", "a.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
