//! End-to-end runs of the `kire` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn kire(work: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kire")).arg("--work-dir").arg(work).arg("-q").args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {stderr}"))
}

/// A config file pointing at the hand-built DocRED-style fixtures, with
/// 4-wide embeddings and short schedules.
fn fixture_config(dir: &Path) -> PathBuf {
    let mut text = String::from("preset = desk\nd_word = 4\nd_char = 4\nbase_epochs = 2\nkire_epochs = 2\nae_epochs = 3\n");
    for (key, file) in [
        ("train_path", "docred_3doc.json"),
        ("validation_path", "docred_validation.json"),
        ("test_path", "docred_test.json"),
        ("relation_vocab", "rel_info.json"),
        ("kg_relations", "kg_relations_2line.jsonl"),
        ("kg_attributes", "kg_attributes.jsonl"),
        ("kg_aliases", "kg_aliases.jsonl"),
        ("corefs", "corefs.jsonl"),
        ("entity_links", "entity_links.jsonl"),
        ("word_embeddings", "words4.txt"),
        ("char_embeddings", "chars4.txt"),
    ] {
        text.push_str(&format!("{key} = {}\n", fixture(file).display()));
    }
    let path = dir.join("run.conf");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn synthetic_run_fits_training_data_in_the_knowledge_stage() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path();
    let summary = json(&kire(work, &["synth", "--seed", "7", "--n-docs", "50"]));
    assert_eq!(summary["documents"]["train"], 40);
    assert!(fs::read_to_string(work.join("kire.conf")).unwrap().contains("preset = desk"));

    let trained = json(&kire(work, &["train"]));
    let history = trained["history"].as_array().unwrap();
    assert!(history.iter().any(|r| r["stage"] == "kire"));

    let report = json(&kire(work, &["evaluate", "--checkpoint", "last"]));
    let train = report["splits"].as_array().unwrap().iter().find(|s| s["split"] == "train").unwrap();
    let f1 = train["f1"].as_f64().unwrap();
    assert!(f1 >= 0.95, "knowledge-stage training F1 {f1}");
    assert!(report["kg_only"]["relations"].as_array().is_some_and(|r| !r.is_empty()));

    let run = report["run_id"].as_str().unwrap();
    for name in ["train.json", "metrics_last.json", "autoencoder.json", "config.conf"] {
        assert!(work.join("reports").join(run).join(name).is_file(), "{name}");
    }
    for name in ["best", "last", "autoencoder"] {
        assert!(work.join("checkpoints").join(run).join(name).join("manifest.json").is_file(), "{name}");
    }
}

#[test]
fn prepare_train_predict_on_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("work");
    let conf = fixture_config(dir.path());
    let conf = conf.to_str().unwrap();

    let summary = json(&kire(&work, &["--config", conf, "prepare"]));
    assert_eq!(summary["documents"]["train"], 3);
    assert_eq!(summary["facts"]["train"], 5);
    assert_eq!(summary["relations"], 3);
    assert_eq!(summary["kg_entities"], 3);
    assert_eq!(summary["kg_relation_triples"], 2);
    assert_eq!(summary["coreference_triples"], 2);

    json(&kire(&work, &["--config", conf, "train"]));
    let predictions = json(&kire(&work, &["--config", conf, "predict", "--split", "test", "--threshold", "0.2"]));
    assert_eq!(predictions["documents"][0]["doc_id"], "Severn");
    for fact in predictions["documents"][0]["facts"].as_array().unwrap() {
        assert!(fact["score"].as_f64().unwrap() >= 0.2);
    }

    // A flag overrides the file and changes the run.
    let other = json(&kire(&work, &["--config", conf, "param-count", "--d-token", "16"]));
    assert!(other["formulas"].as_array().unwrap().iter().any(|f| f["name"] == "coref_mlp"));
}

#[test]
fn multi_seed_reports_mean_and_std() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("work");
    let conf = fixture_config(dir.path());
    let conf = conf.to_str().unwrap();
    json(&kire(&work, &["--config", conf, "prepare"]));
    let report = json(&kire(&work, &["--config", conf, "multi-seed", "--k", "2", "--seed", "3"]));
    let runs = report["runs"].as_array().unwrap();
    assert_eq!(runs.iter().map(|r| r["seed"].as_u64().unwrap()).collect::<Vec<_>>(), [3, 4]);
    let f1 = &report["summary"]["test.f1"];
    let values: Vec<f64> = runs.iter().map(|r| r["metrics"]["test.f1"].as_f64().unwrap()).collect();
    let mean = (values[0] + values[1]) / 2.0;
    assert!((f1["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    let std = ((values[0] - mean).powi(2) + (values[1] - mean).powi(2)).sqrt();
    assert!((f1["std"].as_f64().unwrap() - std).abs() < 1e-12);
}

#[test]
fn param_count_without_data_uses_placeholder_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let report = json(&kire(dir.path(), &["param-count", "--n-token", "300", "--n-align", "40"]));
    let coref = report["formulas"].as_array().unwrap().iter().find(|f| f["name"] == "coref_mlp").unwrap();
    assert_eq!(coref["formula_value"], 56_520);
    assert_eq!(report["n_token"], 300);
}

#[test]
fn configuration_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "d_token = 8\nno_such_key = 1\n").unwrap();
    let out = kire(dir.path(), &["--config", conf.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_line(&out);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("no_such_key"));

    let out = kire(dir.path(), &["train", "--d-word", "7"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = kire(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["exit_code"], 3);
}

#[test]
fn divergence_exits_with_code_4_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path();
    json(&kire(work, &["synth", "--seed", "1", "--n-docs", "12"]));
    let out = kire(work, &["train", "--learning-rate", "1e12", "--base-epochs", "2", "--kire-epochs", "2", "--ae-epochs", "1"]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_line(&out)["error"], "numerical");
    assert!(!work.join("checkpoints").exists());
    assert!(!work.join("reports").exists());
}
