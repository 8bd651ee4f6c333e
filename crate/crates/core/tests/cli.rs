mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use textvqa::dataset::{load_dataset, write_dataset};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_textvqa"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn tokenize_two_entries_with_tss_has_two_separators() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let mut rec = common::sample_record("two", "zqx");
    rec.ocr.truncate(2);
    write_dataset(&data, &[rec]).unwrap();
    let v = ok_json(&["tokenize", "--data", p(&data), "--strategy", "tss"]);
    let seps = v["tokens"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|t| t["source"] == "SEPARATOR")
        .count();
    assert_eq!(seps, 2);
    let v = ok_json(&["tokenize", "--data", p(&data), "--strategy", "none", "--id", "two"]);
    assert!(v["tokens"].as_array().unwrap().iter().all(|t| t["source"] != "SEPARATOR"));
}

#[test]
fn eval_with_ground_truth_predictions_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    assert!(run(&["synth", "--seed", "3", "--n", "20", "--out", p(&data)]).status.success());
    let recs = load_dataset(&data).unwrap();
    let preds: String = recs
        .iter()
        .map(|r| format!("{}\n", serde_json::json!({"id": r.id, "prediction": r.answers[0]})))
        .collect();
    let pred_path = dir.path().join("p.jsonl");
    std::fs::write(&pred_path, preds).unwrap();
    let v = ok_json(&["eval", "--data", p(&data), "--predictions", p(&pred_path)]);
    assert_eq!(v["soft_accuracy"], 1.0);
    assert_eq!(v["anls"], 1.0);
    assert_eq!(v["rows"].as_array().unwrap().len(), 20);

    let s = ok_json(&["stats", "--data", p(&data), "--predictions", p(&pred_path)]);
    assert_eq!(s["short"]["ratio"], 1.0);
    assert_eq!(s["total_answers"], 200);
}

#[test]
fn synth_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for path in [&a, &b] {
        assert!(run(&["synth", "--seed", "9", "--n", "15", "--out", p(path)]).status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn usage_errors_exit_2() {
    let out = run(&["eval", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
}

#[test]
fn failures_exit_1_with_one_line() {
    let out = run(&["eval", "--data", "/nonexistent/file.jsonl", "--predictions", "/nonexistent/p"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error:"));

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.jsonl");
    let mut rec = common::sample_record("bad", "x");
    rec.answers.pop();
    std::fs::write(&data, serde_json::to_string(&rec).unwrap()).unwrap();
    let out = run(&["tokenize", "--data", p(&data)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("answers"));
}

#[test]
fn train_then_inspect_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let ckpt = dir.path().join("m.json");
    let log = dir.path().join("log.jsonl");
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "d_model = 16\nnum_heads = 4\nd_ff = 16\nfeature_dim = 16\nmax_iters = 4\nbatch_size = 2\neval_every = 2\n").unwrap();
    assert!(run(&["synth", "--seed", "5", "--n", "6", "--out", p(&data)]).status.success());
    let out = run(&[
        "train",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--position-mode",
        "scp",
        "--strategy",
        "tss",
        "--seed",
        "2",
        "--out",
        p(&ckpt),
        "--log",
        p(&log),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0]["loss"].as_f64().unwrap() > 0.0);
    assert!(lines[1]["soft_accuracy"].is_number());
    assert!(lines[0].get("soft_accuracy").is_none());

    let v = ok_json(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--raw-anls"]);
    assert_eq!(v["rows"].as_array().unwrap().len(), 6);

    let b = ok_json(&["bias", "--data", p(&data), "--checkpoint", p(&ckpt), "--attention"]);
    let buckets = b["buckets"].as_array().unwrap();
    let m = buckets.len();
    assert!(m > 0);
    let heads = b["bias"].as_array().unwrap();
    assert_eq!(heads.len(), 4);
    assert_eq!(heads[0].as_array().unwrap().len(), m);
    let layers = b["attention"].as_array().unwrap();
    assert_eq!(layers.len(), 2);
    assert_eq!(layers[0].as_array().unwrap().len(), 4);

    let plain = ok_json(&["bias", "--data", p(&data)]);
    assert!(plain.get("bias").is_none());
    assert_eq!(plain["buckets"][0][0], 0);
    assert_eq!(run(&["bias", "--data", p(&data), "--attention"]).status.code(), Some(1));
}

#[test]
fn vocab_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    assert!(run(&["vocab", "--out", p(&path)]).status.success());
    let v = textvqa::vocab::Vocab::load(&path).unwrap();
    assert_eq!(v, textvqa::vocab::Vocab::default_vocab());
}

#[test]
fn synth_train_eval_overfits_32_samples() {
    let _g = common::heavy();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let ckpt = dir.path().join("m.json");
    assert!(run(&["synth", "--seed", "1", "--n", "32", "--out", p(&data)]).status.success());
    let out = run(&["train", "--data", p(&data), "--seed", "1", "--out", p(&ckpt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = ok_json(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt)]);
    let acc = v["soft_accuracy"].as_f64().unwrap();
    assert!(acc >= 0.95, "soft accuracy {acc}");
}

#[test]
fn proximity_corpus_asks_for_the_closest_entry() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let out = run(&["synth", "--corpus", "proximity", "--seed", "4", "--n", "25", "--out", p(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let recs = load_dataset(&data).unwrap();
    assert_eq!(recs.len(), 25);
    assert!(recs.iter().all(|r| r.question.starts_with("which word is closest to ")));
    assert!(recs.iter().any(|r| r.ocr.iter().any(|o| o.text.contains(' '))));
}
