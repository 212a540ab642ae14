use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dualprompt::cli::{read_ablation_csv, write_ablation_csv};
use tempfile::TempDir;

const TINY: &str = r#"{
  "data": { "synth": { "n_train": 16, "n_test": 6, "seed": 4 } },
  "model": { "layers": 1, "model_dim": 16, "heads": 2, "context_length": 160, "seed": 0 },
  "templates": ["f2"],
  "train": { "lr": 0.01, "max_epochs": 2 },
  "value_gen": { "lr": 0.01, "max_epochs": 2, "tune_max_epochs": 1 }
}"#;

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualprompt"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn workspace() -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn checkpoints(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ckpt"))
        .collect();
    names.sort();
    names
}

#[test]
fn help_and_version_exit_zero() {
    let dir = TempDir::new().unwrap();
    assert_eq!(bin(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(bin(dir.path(), &["--version"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(bin(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(bin(dir.path(), &["train", "--ratio", "0"]).status.code(), Some(1));
    assert_eq!(bin(dir.path(), &["train", "--templates", "f9"]).status.code(), Some(1));
    assert_eq!(bin(dir.path(), &["synth"]).status.code(), Some(1));
}

#[test]
fn synth_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = bin(dir.path(), &["synth", "--n", "12", "--seed", "3", "--out", "a.json"]);
    let b = bin(dir.path(), &["synth", "--n", "12", "--seed", "3", "--out", "b.json"]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(b.status.code(), Some(0));
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.json"), read("b.json"));
    let c = bin(dir.path(), &["synth", "--n", "12", "--seed", "4", "--out", "c.json"]);
    assert_eq!(c.status.code(), Some(0));
    assert_ne!(read("a.json"), read("c.json"));
    let corpus = dualprompt::corpus::load_corpus(dir.path().join("a.json")).unwrap();
    assert_eq!(corpus.len(), 12);
}

#[test]
fn synth_rejects_an_invalid_ontology() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"slots": {"day": ["monday"]}, "templates": []}"#).unwrap();
    let o = bin(dir.path(), &["synth", "--spec", "bad.json", "--out", "x.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("synth"), "{}", stderr(&o));
    assert!(!dir.path().join("x.json").exists());
}

#[test]
fn train_predict_eval_compose() {
    let (dir, _) = workspace();
    let t = bin(dir.path(), &["train", "--config", "tiny.json", "--ratio", "0.5", "--out", "run"]);
    assert_eq!(t.status.code(), Some(0), "{}", stderr(&t));
    let run = dir.path().join("run");
    assert_eq!(
        checkpoints(&run),
        vec!["slot_f2.ckpt", "value_gen.ckpt", "value_gen_tuned.ckpt"]
    );
    for f in ["loss_f2.csv", "rewards.csv", "manifest_train.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest_train.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["few_shot"]["ratio"], 0.5);
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["outputs"].as_object().unwrap().len(), 3);

    let e = bin(dir.path(), &["eval", "--config", "tiny.json", "--ratio", "0.5", "--out", "run"]);
    assert_eq!(e.status.code(), Some(0), "{}", stderr(&e));
    let report = dualprompt::eval::load_report(&run.join("report.json")).unwrap();
    assert_eq!(report.n_turns, dualprompt::inference::read_predictions(&run.join("predictions.jsonl")).unwrap().len());

    let again = bin(dir.path(), &["eval", "--config", "tiny.json", "--out", "run", "--predictions", "run/predictions.jsonl"]);
    assert_eq!(again.status.code(), Some(0), "{}", stderr(&again));
    assert_eq!(dualprompt::eval::load_report(&run.join("report.json")).unwrap(), report);
}

#[test]
fn retraining_reproduces_checkpoints() {
    let (dir, _) = workspace();
    for out in ["a", "b"] {
        let o = bin(dir.path(), &["train", "--config", "tiny.json", "--seed", "7", "--out", out]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let names = checkpoints(&dir.path().join("a"));
    assert_eq!(names, checkpoints(&dir.path().join("b")));
    for n in &names {
        let read = |d: &str| std::fs::read(dir.path().join(d).join(n)).unwrap();
        assert_eq!(read("a"), read("b"), "{n} differs");
    }
}

#[test]
fn two_templates_give_two_slot_checkpoints() {
    let (dir, _) = workspace();
    let o = bin(dir.path(), &["train", "--config", "tiny.json", "--templates", "f1,f3", "--out", "run"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let slots: Vec<String> = checkpoints(&dir.path().join("run")).into_iter().filter(|n| n.starts_with("slot_")).collect();
    assert_eq!(slots, vec!["slot_f1.ckpt", "slot_f3.ckpt"]);
}

#[test]
fn missing_checkpoint_is_named() {
    let (dir, _) = workspace();
    let o = bin(dir.path(), &["predict", "--config", "tiny.json", "--out", "empty"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("slot_f2.ckpt"), "{}", stderr(&o));
}

#[test]
fn tune_values_after_train() {
    let (dir, _) = workspace();
    let o = bin(dir.path(), &["train", "--config", "tiny.json", "--out", "run"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let tuned = dir.path().join("run/value_gen_tuned.ckpt");
    std::fs::remove_file(&tuned).unwrap();
    let t = bin(dir.path(), &["tune-values", "--config", "tiny.json", "--out", "run"]);
    assert_eq!(t.status.code(), Some(0), "{}", stderr(&t));
    assert!(tuned.exists());
    assert!(dir.path().join("run/manifest_tune-values.json").exists());
}

#[test]
fn ablate_w_rows_round_trip() {
    let (dir, _) = workspace();
    let one = bin(dir.path(), &["ablate-w", "--config", "tiny.json", "--w", "0", "--out", "one"]);
    assert_eq!(one.status.code(), Some(0), "{}", stderr(&one));
    let rows = read_ablation_csv(&dir.path().join("one/ablate_w.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].0, 0.0);

    let four = bin(dir.path(), &["ablate-w", "--config", "tiny.json", "--out", "four"]);
    assert_eq!(four.status.code(), Some(0), "{}", stderr(&four));
    let path = dir.path().join("four/ablate_w.csv");
    let rows = read_ablation_csv(&path).unwrap();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0.0, 0.1, 0.3, 0.5]);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.1)));

    let copy = dir.path().join("copy.csv");
    write_ablation_csv(&copy, &rows).unwrap();
    assert_eq!(read_ablation_csv(&copy).unwrap(), rows);
    assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn analyze_reports_the_match_rate() {
    let dir = TempDir::new().unwrap();
    assert_eq!(bin(dir.path(), &["synth", "--n", "40", "--out", "c.json"]).status.code(), Some(0));
    let o = bin(dir.path(), &["analyze", "--corpus", "c.json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["conversations"], 40);
    let rate = v["value_match_rate"].as_f64().unwrap();
    assert!(rate > 0.5 && rate <= 1.0, "{rate}");
}
