//! End-to-end checks of the `film` binary: exit codes, produced files, and
//! error messages. Everything runs on throwaway configs small enough to
//! finish in well under a second.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn film(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_film"))
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let corpus = dir.join("corpus.txt");
    std::fs::copy(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/tiny.txt"),
        &corpus,
    )
    .unwrap();
    let out = dir.join("run");
    let cfg = format!(
        "corpus.path = {}\n\
         model.hidden_dim = 16\n\
         model.n_layers = 1\n\
         model.n_heads = 2\n\
         train.iterations = 20\n\
         train.batch_size = 2\n\
         train.capture_every = 10\n\
         beam.k = 4\n\
         reorder.steps = 4\n\
         reorder.candidates = 4\n\
         seed = 3\n\
         out = {}\n\
         {extra}",
        corpus.display(),
        out.display()
    );
    let path = dir.join("exp.cfg");
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn train_writes_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = film(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    for file in ["config.resolved.txt", "vocab.txt", "loss.csv"] {
        assert!(run.join(file).is_file(), "missing {file}");
    }
    assert!(run.join("transcript/manifest.json").is_file());
    let loss = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(loss.starts_with("iteration,loss\n"));
    assert_eq!(loss.lines().count(), 21); // header + 20 iterations
}

#[test]
fn attack_writes_results_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(film(&["train", "--config", cfg]).status.code(), Some(0));
    let out = film(&["attack", "--config", cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    assert!(run.join("results.jsonl").is_file());
    let metrics = std::fs::read_to_string(run.join("metrics.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&metrics).unwrap();
    assert!(parsed["aggregate"]["rougeL"]["mean"].is_number());
}

#[test]
fn zero_iterations_trains_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let text = std::fs::read_to_string(&cfg).unwrap();
    std::fs::write(&cfg, text.replace("train.iterations = 20", "train.iterations = 0")).unwrap();
    let out = film(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let manifest =
        std::fs::read_to_string(dir.path().join("run/transcript/manifest.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(parsed["entries"].as_array().unwrap().len(), 0);
}

#[test]
fn missing_corpus_exits_2_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    std::fs::remove_file(dir.path().join("corpus.txt")).unwrap();
    let out = film(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("corpus.txt"), "stderr: {stderr}");
}

#[test]
fn missing_config_flag_exits_2() {
    let out = film(&["train"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "model.dropout = 0.1\n");
    let out = film(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("model.dropout"), "stderr: {stderr}");
}

#[test]
fn unknown_sweep_axis_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sweep.values = 1,2\n");
    let out = film(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--axis",
        "learning_rate_warmup",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_writes_csv_with_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sweep.values = 1,2\n");
    let out = film(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--axis",
        "batch_size",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv =
        std::fs::read_to_string(dir.path().join("run/sweep_batch_size.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "axis_value,rouge1,rouge2,rougeL,nerr,precision,recall");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,"));
    assert!(lines[2].starts_with("2,"));
}

#[test]
fn frozen_embeddings_yield_empty_results_and_zero_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "defense.kind = freeze_embeddings\n");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(film(&["train", "--config", cfg]).status.code(), Some(0));
    assert_eq!(film(&["attack", "--config", cfg]).status.code(), Some(0));
    let run = dir.path().join("run");
    let results = std::fs::read_to_string(run.join("results.jsonl")).unwrap();
    assert!(results.trim().is_empty(), "expected no recoveries: {results}");
    let metrics = std::fs::read_to_string(run.join("metrics.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&metrics).unwrap();
    assert_eq!(parsed["aggregate"]["precision"]["mean"], 0.0);
    assert_eq!(parsed["aggregate"]["recall"]["mean"], 0.0);
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(
        film(&["train", "--config", cfg, "--seed", "99"]).status.code(),
        Some(0)
    );
    let resolved =
        std::fs::read_to_string(dir.path().join("run/config.resolved.txt")).unwrap();
    assert!(resolved.contains("seed = 99"), "{resolved}");
}
