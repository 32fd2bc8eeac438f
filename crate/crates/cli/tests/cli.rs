use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qagen_core::corpus::{self, ContextDocument, GoldQA, Source};
use qagen_core::synthesis::{read_output, RecordStatus};
use serde_json::{json, Value};

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");

fn qagen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qagen")).args(args).args(["--log-level", "warn"]).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(name: &str) -> String {
    format!("{FIXTURES}/{name}")
}

fn ingest_news3(dir: &Path) -> PathBuf {
    let out = dir.join("ingest");
    let o = qagen(&["ingest", "--source", "news", "--input", &fixture("news3.jsonl"), "--k", "3", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.join("contexts.jsonl")
}

fn gold_for(dir: &Path, contexts: &Path) -> PathBuf {
    let docs = corpus::read_corpus(contexts).unwrap();
    let gold: Vec<GoldQA> = docs
        .iter()
        .enumerate()
        .map(|(i, d)| GoldQA {
            id: format!("q{i}"),
            context_id: d.id.clone(),
            question: format!("記事{i}の年は？"),
            answers: vec![format!("{}年", 2000 + i), "別解".into()],
        })
        .collect();
    let path = dir.join("gold.jsonl");
    corpus::write_gold(&path, &gold).unwrap();
    path
}

fn predictions(dir: &Path, name: &str, answers: &[(&str, String)]) -> PathBuf {
    let body: String = answers.iter().map(|(q, a)| json!({"question_id": q, "answer": a}).to_string() + "\n").collect();
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn three_context_example_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let contexts = ingest_news3(tmp.path());
    let before = std::fs::read(fixture("news3.jsonl")).unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        let o = qagen(&["synthesize", "--contexts", s(&contexts), "--mock", &fixture("mock3.jsonl"), "--out", s(&dir)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("ok=3"), "{}", stdout(&o));
        assert!(dir.join("resolved-config.toml").exists());
        outputs.push(std::fs::read(dir.join("synthesis.jsonl")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(std::fs::read(fixture("news3.jsonl")).unwrap(), before, "input was modified");

    let (records, manifest) = read_output(&tmp.path().join("a/synthesis.jsonl")).unwrap();
    assert!(records.iter().all(|r| r.status == RecordStatus::Ok));
    assert_eq!(records[0].pairs[0].answer, "2000年");
    assert_eq!(manifest.unwrap().label, "news-n1-zero");
}

#[test]
fn rerun_resumes_without_new_calls() {
    let tmp = tempfile::tempdir().unwrap();
    let contexts = ingest_news3(tmp.path());
    let dir = tmp.path().join("run");
    let args = ["synthesize", "--contexts", s(&contexts), "--mock", &fixture("mock3.jsonl"), "--out", s(&dir)];
    assert_eq!(code(&qagen(&args)), 0);
    let first = std::fs::read(dir.join("synthesis.jsonl")).unwrap();
    let o = qagen(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("3 resumed"), "{}", stdout(&o));
    assert_eq!(std::fs::read(dir.join("synthesis.jsonl")).unwrap(), first);
}

#[test]
fn gold_identical_predictions_score_full_bleu() {
    let tmp = tempfile::tempdir().unwrap();
    let contexts = ingest_news3(tmp.path());
    let gold = gold_for(tmp.path(), &contexts);
    let preds = predictions(tmp.path(), "human.jsonl", &[("q0", "2000年".into()), ("q1", "2001年".into()), ("q2", "2002年".into())]);
    let out = tmp.path().join("eval");
    let o = qagen(&["evaluate", "--predictions", s(&preds), "--gold", s(&gold), "--embeddings", "hash", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let row = &report[0];
    assert_eq!(row["run"], "human");
    assert_eq!(row["bleu"], 100.0);
    assert!((row["bert_score"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(row["n_eval_items"], 3);
    assert!(out.join("report.csv").exists() && out.join("report.md").exists());
    assert!(out.join("resolved-config.toml").exists());

    // re-rendering the written JSON reproduces the written CSV
    let o = qagen(&["report", "--input", s(&out.join("report.json")), "--format", "csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o), std::fs::read_to_string(out.join("report.csv")).unwrap());
}

#[test]
fn evaluate_rejects_unknown_run_label() {
    let tmp = tempfile::tempdir().unwrap();
    let contexts = ingest_news3(tmp.path());
    let gold = gold_for(tmp.path(), &contexts);
    let preds = predictions(tmp.path(), "mystery.jsonl", &[("q0", "x".into())]);
    let o = qagen(&["evaluate", "--predictions", s(&preds), "--gold", s(&gold), "--embeddings", "hash"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("unknown run `mystery`"), "{}", stderr(&o));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&qagen(&["grid", "--bogus"])), 2);
    assert_eq!(code(&qagen(&[])), 2);

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[gateway]\nrpm = 0\n").unwrap();
    let o = qagen(&["--config", s(&bad), "grid"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("gateway.rpm"), "{}", stderr(&o));

    std::fs::write(&bad, "[gatway]\nrpm = 10\n").unwrap();
    let o = qagen(&["--config", s(&bad), "grid"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("gatway"), "{}", stderr(&o));

    std::fs::write(&bad, "[gateway]\nbase_url = \"${QAGEN_TEST_SURELY_UNSET}\"\n").unwrap();
    let o = qagen(&["--config", s(&bad), "grid"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("QAGEN_TEST_SURELY_UNSET"), "{}", stderr(&o));

    let o = qagen(&["--config", s(&tmp.path().join("missing.toml")), "grid"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn print_config_reflects_overrides_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "[prompt]\nn = 3\n[output]\ndir = \"elsewhere\"\n").unwrap();
    let out = tmp.path().join("never");
    let o = qagen(&["--config", s(&cfg), "--print-config", "synthesize", "--n", "1", "--mode", "one-shot", "--temperature", "0.5", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let printed: toml::Value = toml::from_str(&stdout(&o)).unwrap();
    assert_eq!(printed["prompt"]["n"].as_integer(), Some(1));
    assert_eq!(printed["prompt"]["mode"].as_str(), Some("one_shot"));
    assert_eq!(printed["generation"]["temperature"].as_float(), Some(0.5));
    assert!(printed["output"]["dir"].as_str().unwrap().ends_with("elsewhere"), "relative paths resolve against the config");
    assert!(!out.exists());
}

#[test]
fn version_is_json() {
    let o = qagen(&["--version"]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["name"], "qagen");
    assert!(v["record_version"].is_u64());
}

#[test]
fn emit_train_from_synthesis_and_gold() {
    let tmp = tempfile::tempdir().unwrap();
    let contexts = ingest_news3(tmp.path());
    let run = tmp.path().join("run");
    assert_eq!(code(&qagen(&["synthesize", "--contexts", s(&contexts), "--mock", &fixture("mock3.jsonl"), "--out", s(&run)])), 0);

    let out = tmp.path().join("train-synth");
    let o = qagen(&["emit-train", "--synthesis", s(&run.join("synthesis.jsonl")), "--contexts", s(&contexts), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines: Vec<Value> = std::fs::read_to_string(out.join("train.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["response"], "2000年");
    assert!(out.join("resolved-config.toml").exists());

    let gold = gold_for(tmp.path(), &contexts);
    let out = tmp.path().join("train-gold");
    let o = qagen(&["emit-train", "--gold", s(&gold), "--contexts", s(&contexts), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first: Value = serde_json::from_str(std::fs::read_to_string(out.join("train.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["response"], "2000年", "the first gold answer is the target");

    assert_eq!(code(&qagen(&["emit-train", "--contexts", s(&contexts)])), 2);
}

#[test]
fn grid_flags_override_sets() {
    let tmp = tempfile::tempdir().unwrap();
    let o = qagen(&["grid", "--batch-size", "4", "--learning-rate", "1e-5,5e-5", "--epochs", "3", "--lora-r", "8", "--lora-alpha", "16", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let raw = std::fs::read_to_string(tmp.path().join("grid.jsonl")).unwrap();
    assert_eq!(raw.lines().count(), 2);
    let snapshot = std::fs::read_to_string(tmp.path().join("resolved-config.toml")).unwrap();
    assert!(snapshot.starts_with("# "), "snapshot starts with the command line");
    assert!(snapshot.lines().next().unwrap().contains("--lora-r 8"));
}

#[test]
fn ingest_jsquad_filters_gold_to_sampled_contexts() {
    let tmp = tempfile::tempdir().unwrap();
    let paragraphs: Vec<Value> = (0..6)
        .map(|i| json!({"context": format!("段落{i}の本文です。"), "qas": [{"id": format!("qa{i}"), "question": format!("質問{i}"), "answers": [{"text": format!("答{i}"), "answer_start": 0}]}]}))
        .collect();
    let raw = json!({"version": "v1", "data": [{"title": "記事", "paragraphs": paragraphs}]});
    let input = tmp.path().join("train.json");
    std::fs::write(&input, raw.to_string()).unwrap();
    let out = tmp.path().join("out");
    let o = qagen(&["ingest", "--source", "jsquad", "--input", s(&input), "--k", "4", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let docs = corpus::read_corpus(&out.join("contexts.jsonl")).unwrap();
    let gold = corpus::read_gold(&out.join("gold.jsonl")).unwrap();
    assert_eq!(docs.len(), 4);
    assert_eq!(gold.len(), 4);
    assert!(gold.iter().all(|g| docs.iter().any(|d| d.id == g.context_id)));

    let o = qagen(&["ingest", "--source", "jsquad", "--input", s(&input), "--k", "7", "--out", s(&out)]);
    assert_ne!(code(&o), 0, "sampling more contexts than exist must fail");
}

#[test]
fn annotate_create_then_report_session() {
    let tmp = tempfile::tempdir().unwrap();
    let docs: Vec<ContextDocument> = (0..10).map(|i| ContextDocument::new(format!("c{i}"), Source::Wiki, None, format!("文脈{i}"))).collect();
    let contexts = tmp.path().join("contexts.jsonl");
    corpus::write_corpus(&contexts, &docs).unwrap();
    let gold: Vec<GoldQA> = (0..10)
        .map(|i| GoldQA { id: format!("q{i}"), context_id: format!("c{i}"), question: format!("質問{i}"), answers: vec![format!("答{i}")] })
        .collect();
    let gold_path = tmp.path().join("gold.jsonl");
    corpus::write_gold(&gold_path, &gold).unwrap();
    let answers: Vec<(&str, String)> = gold.iter().map(|g| (g.id.as_str(), g.answers[0].clone())).collect();
    let a = predictions(tmp.path(), "a.jsonl", &answers);
    let b = predictions(tmp.path(), "b.jsonl", &answers);
    let store = tmp.path().join("store");
    let sys_a = format!("finetuned={}", s(&a));
    let sys_b = format!("gpt={}", s(&b));
    let o = qagen(&[
        "annotate-create", "--system", &sys_a, "--system", &sys_b, "--gold", s(&gold_path), "--contexts", s(&contexts),
        "--session-id", "pilot", "--judges", "j1,j2", "--sample-size", "5", "--dir", s(&store),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let created: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(created["session_id"], "pilot");
    assert_eq!(created["total_items"], 10);

    let log_before = std::fs::read(store.join("pilot.jsonl")).unwrap();
    let o = qagen(&["report", "--session", "pilot", "--format", "csv", "--dir", s(&store)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = stdout(&o);
    assert!(csv.starts_with("system,resolved,correct,accuracy\n"), "{csv}");
    assert!(csv.contains("all,0,0,-"), "{csv}");
    assert_eq!(std::fs::read(store.join("pilot.jsonl")).unwrap(), log_before, "report must not touch the log");

    assert_eq!(code(&qagen(&["report", "--session", "nope", "--dir", s(&store)])), 2);
}

#[test]
fn serve_requires_token_variable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "[annotation]\ntoken_env = \"QAGEN_TEST_TOKEN_SURELY_UNSET\"\n").unwrap();
    let o = qagen(&["--config", s(&cfg), "annotate-serve", "--bind", "127.0.0.1:0", "--dir", s(tmp.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("QAGEN_TEST_TOKEN_SURELY_UNSET"));
}
