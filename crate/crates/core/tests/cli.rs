//! End-to-end runs of the `iiht` binary.

use std::path::Path;
use std::process::{Command, Output};

use iiht::metrics::EvalReport;

fn iiht(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iiht"))
        .args(args)
        .env_remove("IIHT_SEED")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn synth_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = iiht(&["synth-data", "--seed", "7", "--out", p(d), "--train", "6", "--val", "2", "--test", "2"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (fa, fb) = (read_all(&a), read_all(&b));
    assert_eq!(fa.len(), 5);
    assert_eq!(fa, fb);
}

#[test]
fn seed_defaults_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str, seed: &str| {
        let d = dir.path().join(sub);
        let out = Command::new(env!("CARGO_BIN_EXE_iiht"))
            .args(["synth-data", "--out", p(&d), "--train", "3", "--val", "1", "--test", "1"])
            .env("IIHT_SEED", seed)
            .output()
            .unwrap();
        assert!(out.status.success());
        std::fs::read(d.join("train.jsonl")).unwrap()
    };
    let explicit = dir.path().join("x");
    iiht(&["synth-data", "--seed", "3", "--out", p(&explicit), "--train", "3", "--val", "1", "--test", "1"]);
    assert_eq!(run("e3", "3"), std::fs::read(explicit.join("train.jsonl")).unwrap());
    assert_ne!(run("e4", "4"), run("e5", "5"));
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    let out = iiht(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = iiht(&["evaluate", "--checkpoint", "/nonexistent/model.ckpt", "--data", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/model.ckpt"));

    let out = iiht(&["synth-data", "--out", "/tmp/unused", "--indicators", "40"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_on_a_fresh_build() {
    let out = iiht(&["gradcheck", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("blended loss"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn train_generate_evaluate_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = iiht(&["synth-data", "--seed", "11", "--out", p(&data), "--indicators", "4", "--train", "8", "--val", "2", "--test", "3"]);
    assert!(out.status.success());
    let inputs_before = read_all(&data);

    let train = |name: &str| {
        let ckpt = dir.path().join(name);
        let out = iiht(&[
            "train", "--data", p(&data), "--out", p(&ckpt), "--epochs", "2", "--hidden", "16", "--layers", "1", "--seed", "5", "--vocab-size", "120",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        ckpt
    };
    let ckpt = train("m.ckpt");
    let again = train("m2.ckpt");
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again).unwrap());
    let csv = std::fs::read_to_string(ckpt.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "epoch,train_loss,val_loss,L_G,L_C,state_acc");
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(csv, std::fs::read_to_string(again.with_extension("csv")).unwrap());

    let test = data.join("test.jsonl");
    let out = iiht(&["generate", "--checkpoint", p(&ckpt), "--data", p(&test), "--index", "1", "--set", "pneumothorax=positive", "--json", "--max-len", "30"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["id"], "test-00001");
    assert_eq!(v["indicators"].as_array().unwrap().len(), 4);
    assert_eq!(v["indicators"][1]["override"], "positive");

    let out = iiht(&["generate", "--checkpoint", p(&ckpt), "--data", p(&test), "--set", "spleen=positive"]);
    assert_eq!(out.status.code(), Some(1));
    let out = iiht(&["generate", "--checkpoint", p(&ckpt), "--data", p(&test), "--id", "missing"]);
    assert_eq!(out.status.code(), Some(2));

    let report_path = dir.path().join("eval.json");
    let out = iiht(&["evaluate", "--checkpoint", p(&ckpt), "--data", p(&test), "--beam", "2", "--max-len", "30", "--out", p(&report_path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.n_pairs, 3);
    for s in [report.bleu1, report.bleu4, report.rouge_l, report.meteor] {
        assert!((0.0..=1.0).contains(&s));
    }
    assert_eq!(report.confusion.len(), 4);

    let out = iiht(&["inspect", "--checkpoint", p(&ckpt)]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success());
    assert!(text.contains("epoch 2 step 8"), "{text}");
    assert!(text.contains("classifier.states [16, 3]"));

    // resume two more epochs
    let out = iiht(&["train", "--data", p(&data), "--out", p(&again), "--resume", p(&ckpt), "--epochs", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&iiht(&["inspect", "--checkpoint", p(&again)]).stdout).into_owned();
    assert!(text.contains("epoch 4 step 16"), "{text}");

    assert_eq!(read_all(&data), inputs_before);
}

#[test]
fn paper_preset_sets_published_hyperparameters() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    iiht(&["synth-data", "--out", p(&data), "--indicators", "2", "--train", "2", "--val", "1", "--test", "1"]);
    let ckpt = dir.path().join("paper.ckpt");
    let out = iiht(&["train", "--preset", "paper", "--epochs", "1", "--vocab-size", "40", "--data", p(&data), "--out", p(&ckpt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&iiht(&["inspect", "--checkpoint", p(&ckpt)]).stdout).into_owned();
    assert!(text.contains("\"hidden\":512"), "{text}");
    for needle in ["\"lambda\":0.5", "\"learning_rate\":1e-6", "\"weight_decay\":0.0001", "\"batch_size\":8"] {
        assert!(text.contains(needle), "{needle} missing in {text}");
    }
}
