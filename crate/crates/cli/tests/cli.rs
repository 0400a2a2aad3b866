use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn sdm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdm")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sdm(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn blobs(dir: &Path) -> PathBuf {
    let data = dir.join("blobs.jsonl");
    ok(&["synth", "--kind", "blobs", "--out", p(&data), "--n", "150", "--seed", "1"]);
    data
}

fn train(data: &Path, out: &Path) {
    ok(&[
        "train", "--data", p(data), "--out", p(out), "--alpha", "0.9", "--j", "2", "--m", "16", "--lr", "1e-3", "--epochs", "10", "--seed", "5",
    ]);
}

#[test]
fn train_predict_eval_retune() {
    let dir = tempfile::tempdir().unwrap();
    let data = blobs(dir.path());
    let archive = dir.path().join("arch");
    train(&data, &archive);

    let verdicts = dir.path().join("v.jsonl");
    ok(&["predict", "--archive", p(&archive), "--data", p(&data), "--out", p(&verdicts)]);
    let lines: Vec<Value> = fs::read_to_string(&verdicts).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 900);
    let mut keys: Vec<&str> = lines[0].as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["admitted", "d", "exemplar_ids", "hard_qbin", "id", "p_lower", "prediction", "q", "soft_qbin"]);

    let report: Value = serde_json::from_str(&ok(&["eval", "--archive", p(&archive), "--data", p(&data), "--format", "json", "--suspects"])).unwrap();
    assert_eq!(report["report"]["passes"], Value::Bool(true));
    assert_eq!(report["report"]["marginal"]["total"], 300);
    assert!(report["suspects"].is_array());

    ok(&["retune", "--archive", p(&archive), "--alpha", "0.8"]);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(archive.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["alpha_prime"], 0.8);
    assert!(manifest["datasets"]["train"].is_string());
    let report: Value = serde_json::from_str(&ok(&["eval", "--archive", p(&archive), "--data", p(&data), "--format", "json"])).unwrap();
    assert_eq!(report["report"]["alpha_prime"], 0.8);
}

#[test]
fn baselines_report_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let data = blobs(dir.path());
    let archive = dir.path().join("arch");
    train(&data, &archive);
    let out: Value = serde_json::from_str(&ok(&["baselines", "--archive", p(&archive), "--data", p(&data), "--format", "json"])).unwrap();
    for m in ["softmax", "temp", "aps", "raps"] {
        assert!(out.get(m).is_some(), "missing {m}");
    }
    assert!(out["aps"]["summary"]["coverage"].as_f64().unwrap() >= 0.9);
    let bad = sdm(&["baselines", "--archive", p(&archive), "--data", p(&data), "--methods", "softmax,nope"]);
    assert!(!bad.status.success());
}

#[test]
fn corrupted_archive_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let data = blobs(dir.path());
    let archive = dir.path().join("arch");
    train(&data, &archive);
    let block = archive.join("support.bin");
    let mut bytes = fs::read(&block).unwrap();
    bytes[40] ^= 0x01;
    fs::write(&block, bytes).unwrap();
    let out = sdm(&["predict", "--archive", p(&archive), "--data", p(&data)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}

#[test]
fn identical_seeds_give_identical_archives() {
    let dir = tempfile::tempdir().unwrap();
    let data = blobs(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&data, &a);
    train(&data, &b);
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        let (x, y) = (fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
        if name == "manifest.json" {
            let mut mx: Value = serde_json::from_slice(&x).unwrap();
            let mut my: Value = serde_json::from_slice(&y).unwrap();
            mx["created"] = Value::Null;
            my["created"] = Value::Null;
            assert_eq!(mx, my);
        } else {
            assert_eq!(x, y, "{name:?} differs");
        }
    }
}

#[test]
fn toy_network_train_and_generate() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    ok(&["synth", "--kind", "corpus", "--out", p(&corpus), "--n", "200", "--vocab", "12", "--seed", "2"]);
    let lm = dir.path().join("lm");
    let log = ok(&[
        "net-train", "--corpus", p(&corpus), "--out", p(&lm), "--epochs", "2", "--hidden-dim", "32", "--verifier-epochs", "10", "--seed", "1",
    ]);
    let summary: Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert!(summary["selected_epoch"].as_u64().unwrap() <= 2);
    let prompts = dir.path().join("prompts.jsonl");
    fs::write(&prompts, "{\"id\": \"a\", \"tokens\": [3, 4, 5, 2]}\n{\"tokens\": [6, 7, 8, 2, 9], \"marker\": 3}\n").unwrap();
    let out = ok(&["net-generate", "--lm", p(&lm), "--prompt-file", p(&prompts)]);
    let rows: Vec<Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["id"], "a");
    assert_eq!(rows[1]["id"], "line2");
    assert!(rows.iter().all(|r| r["verdict"]["admitted"].is_boolean()));
}

#[test]
fn invalid_thread_count_fails() {
    let out = Command::new(env!("CARGO_BIN_EXE_sdm"))
        .args(["retune", "--archive", "/nonexistent", "--alpha", "0.9"])
        .env("SDM_THREADS", "0")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("SDM_THREADS"));
}

#[test]
fn missing_archive_fails() {
    let out = sdm(&["predict", "--archive", "/nonexistent/arch", "--data", "/nonexistent/d.jsonl"]);
    assert!(!out.status.success());
}
