//! The `anyecg` binary end to end on a small synthetic corpus.

use std::path::Path;
use std::process::{Command, Output};

fn anyecg(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anyecg"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .env("RUST_BACKTRACE", "0")
        .output()
        .unwrap()
}

fn json(o: &Output) -> serde_json::Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn unknown_subcommand_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = anyecg(dir.path(), &["frobnicate"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("frobnicate"));
}

#[test]
fn training_without_pretraining_names_the_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = anyecg(dir.path(), &["train", "--stage", "1"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("contrastive.safetensors"), "{err}");
    assert!(err.contains("anyecg pretrain"), "{err}");
}

#[test]
fn synth_then_build_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let s = json(&anyecg(&run, &["--seed", "5", "synth", "--reports", "12", "--arrhythmia", "4", "--patients", "3"]));
    assert_eq!(s["reports"], 12);

    let built = json(&anyecg(&run, &["--seed", "5", "build", "all"]));
    let subsets: Vec<&str> = built.as_array().unwrap().iter().map(|b| b["subset"].as_str().unwrap()).collect();
    assert_eq!(subsets, ["reportgen", "localization", "localization-long", "multiecg", "ecgqa"]);
    for b in built.as_array().unwrap() {
        assert!(b["samples"].as_u64().unwrap() > 0, "{b}");
        assert_eq!(b["samples"].as_u64().unwrap(), b["train"].as_u64().unwrap() + b["test"].as_u64().unwrap());
    }
    let first = std::fs::read(run.join("data/localization.jsonl")).unwrap();
    json(&anyecg(&run, &["--seed", "5", "build", "localization"]));
    assert_eq!(std::fs::read(run.join("data/localization.jsonl")).unwrap(), first);

    let o = anyecg(&run, &["eval", "localization"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage3"));
}
