//! The evaluation matrix: which runs exist, how predictions are scored, and
//! how the results are tabulated.
//!
//! Predictions are read from `{predictions_dir}/{label}.jsonl`, one
//! `{"question_id", "answer"}` object per line, and joined to the gold set
//! by question id. The first gold answer is the reference.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{GoldQA, Source};
use crate::gateway::GenerationParams;
use crate::jsonl;
use crate::metrics::{corpus_bert_score, corpus_bleu, BleuTokenizer, EmbeddingProvider, MetricError, Smoothing};
use crate::prompt::PromptMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunKind {
    /// Fine-tuned on synthesized pairs.
    Synthetic { source: Source, n: usize, prompt_mode: PromptMode },
    /// Fine-tuned on the human-written training pairs.
    Human,
    /// The base model without fine-tuning.
    Plain,
}

impl RunKind {
    pub fn default_label(&self) -> String {
        match self {
            RunKind::Synthetic { source, n, prompt_mode } => format!("{source}-n{n}-{}", prompt_mode.short()),
            RunKind::Human => "human".into(),
            RunKind::Plain => "gpt".into(),
        }
    }

    /// Position in the results table: baselines first, then by N, prompt
    /// and context source.
    fn order_key(&self) -> (u8, usize, u8, u8) {
        match self {
            RunKind::Human => (0, 0, 0, 0),
            RunKind::Plain => (1, 0, 0, 0),
            RunKind::Synthetic { source, n, prompt_mode } => {
                let mode = match prompt_mode {
                    PromptMode::ZeroShot => 0,
                    PromptMode::OneShot => 1,
                };
                let src = match source {
                    Source::News => 0,
                    Source::Wiki => 1,
                    Source::Jsquad => 2,
                };
                (2, *n, mode, src)
            }
        }
    }

    fn context_column(&self) -> &'static str {
        match self {
            RunKind::Human => "Human",
            RunKind::Plain => "GPT",
            RunKind::Synthetic { source: Source::News, .. } => "news",
            RunKind::Synthetic { source: Source::Wiki, .. } => "wiki",
            RunKind::Synthetic { source: Source::Jsquad, .. } => "JSQuAD",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub label: String,
    #[serde(flatten)]
    pub kind: RunKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub generation: GenerationParams,
}

impl RunConfig {
    pub fn new(kind: RunKind) -> Self {
        Self { label: kind.default_label(), kind, seed: 0, generation: GenerationParams::default() }
    }
}

/// The two baselines plus every (source, N, prompt) combination in table
/// order.
pub fn full_matrix() -> Vec<RunConfig> {
    let mut runs = vec![RunConfig::new(RunKind::Human), RunConfig::new(RunKind::Plain)];
    for n in [1, 3] {
        for prompt_mode in [PromptMode::ZeroShot, PromptMode::OneShot] {
            for source in [Source::News, Source::Wiki, Source::Jsquad] {
                runs.push(RunConfig::new(RunKind::Synthetic { source, n, prompt_mode }));
            }
        }
    }
    runs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSettings {
    pub bleu_tokenizer: BleuTokenizer,
    pub bleu_smoothing: Smoothing,
    pub embedding_provider: String,
    /// How per-pair BERTScore values become one number.
    pub bert_aggregate: String,
}

impl MetricSettings {
    pub fn new(bleu_tokenizer: BleuTokenizer, bleu_smoothing: Smoothing, provider: &dyn EmbeddingProvider) -> Self {
        Self { bleu_tokenizer, bleu_smoothing, embedding_provider: provider.id(), bert_aggregate: "mean_f1".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub run: String,
    pub kind: RunKind,
    /// Mean per-pair BERTScore F1.
    pub bert_score: f64,
    pub bert_precision: f64,
    pub bert_recall: f64,
    pub bleu: f64,
    pub n_eval_items: usize,
    /// Prediction ids with no gold question.
    pub unmatched_ids: Vec<String>,
    /// Prediction ids that appeared more than once; the first is scored.
    pub duplicate_ids: Vec<String>,
    /// Gold questions with no prediction.
    pub missing_predictions: usize,
    pub settings: MetricSettings,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRun {
    pub run: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixResult {
    pub reports: Vec<MetricReport>,
    pub skipped: Vec<SkippedRun>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: String,
    pub answer: String,
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("no predictions matched a gold question")]
    NothingToScore,
    #[error("gold question `{0}` has no answer")]
    NoGoldAnswer(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Scores one run's predictions against the gold set.
pub fn evaluate_predictions(
    run: &RunConfig,
    gold: &[GoldQA],
    predictions: &[Prediction],
    tokenizer: BleuTokenizer,
    smoothing: Smoothing,
    provider: &dyn EmbeddingProvider,
) -> Result<MetricReport, ExperimentError> {
    let by_id: HashMap<&str, &GoldQA> = gold.iter().map(|g| (g.id.as_str(), g)).collect();
    let mut seen = HashSet::new();
    let (mut unmatched, mut duplicates) = (Vec::new(), Vec::new());
    let (mut hyps, mut refs) = (Vec::new(), Vec::new());
    for p in predictions {
        let Some(g) = by_id.get(p.question_id.as_str()) else {
            unmatched.push(p.question_id.clone());
            continue;
        };
        if !seen.insert(p.question_id.as_str()) {
            duplicates.push(p.question_id.clone());
            continue;
        }
        let reference = g.answers.first().ok_or_else(|| ExperimentError::NoGoldAnswer(g.id.clone()))?;
        hyps.push(p.answer.as_str());
        refs.push(reference.as_str());
    }
    if hyps.is_empty() {
        return Err(ExperimentError::NothingToScore);
    }
    let bleu = corpus_bleu(&hyps, &refs, tokenizer, smoothing)?;
    let bert = corpus_bert_score(&hyps, &refs, provider)?;
    Ok(MetricReport {
        run: run.label.clone(),
        kind: run.kind,
        bert_score: bert.f1,
        bert_precision: bert.precision,
        bert_recall: bert.recall,
        bleu: bleu.score,
        n_eval_items: hyps.len(),
        unmatched_ids: unmatched,
        duplicate_ids: duplicates,
        missing_predictions: gold.len() - seen.len(),
        settings: MetricSettings::new(tokenizer, smoothing, provider),
    })
}

pub fn read_predictions(path: &Path) -> io::Result<Vec<Prediction>> {
    jsonl::read_all(path)
}

/// Evaluates every run whose predictions file exists. Runs with a missing
/// or unusable file are listed in `skipped`; the rest still proceed.
pub fn run_matrix(
    matrix: &[RunConfig],
    gold: &[GoldQA],
    predictions_dir: &Path,
    tokenizer: BleuTokenizer,
    smoothing: Smoothing,
    provider: &dyn EmbeddingProvider,
) -> MatrixResult {
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for run in matrix {
        let path = predictions_dir.join(format!("{}.jsonl", run.label));
        let outcome = read_predictions(&path)
            .map_err(ExperimentError::from)
            .and_then(|preds| evaluate_predictions(run, gold, &preds, tokenizer, smoothing, provider));
        match outcome {
            Ok(report) => reports.push(report),
            Err(e) => skipped.push(SkippedRun { run: run.label.clone(), reason: format!("{}: {e}", path.display()) }),
        }
    }
    reports.sort_by_key(|r| r.kind.order_key());
    MatrixResult { reports, skipped }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown report format `{other}` (expected markdown, csv or json)")),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Markdown => "markdown",
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        })
    }
}

fn n_column(kind: &RunKind) -> String {
    match kind {
        RunKind::Synthetic { n, .. } => n.to_string(),
        _ => "-".into(),
    }
}

fn prompt_column(kind: &RunKind) -> &'static str {
    match kind {
        RunKind::Synthetic { prompt_mode, .. } => prompt_mode.short(),
        _ => "-",
    }
}

const CSV_HEADER: [&str; 12] = [
    "context",
    "N",
    "prompt",
    "bert_score",
    "bleu",
    "bert_precision",
    "bert_recall",
    "n_eval_items",
    "run",
    "bleu_tokenizer",
    "bleu_smoothing",
    "embedding_provider",
];

/// Renders reports in table order. CSV and JSON carry full precision; the
/// markdown table rounds BERTScore to 3 places and BLEU to 2.
pub fn render_report(reports: &[MetricReport], format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(reports).expect("reports serialize") + "\n",
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_HEADER).expect("in-memory write");
            for r in reports {
                w.write_record([
                    r.kind.context_column().to_owned(),
                    n_column(&r.kind),
                    prompt_column(&r.kind).to_owned(),
                    r.bert_score.to_string(),
                    r.bleu.to_string(),
                    r.bert_precision.to_string(),
                    r.bert_recall.to_string(),
                    r.n_eval_items.to_string(),
                    r.run.clone(),
                    r.settings.bleu_tokenizer.to_string(),
                    r.settings.bleu_smoothing.to_string(),
                    r.settings.embedding_provider.clone(),
                ])
                .expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
        }
        ReportFormat::Markdown => {
            let mut out = String::from("| context | N | prompt | BERTScore | BLEU |\n|---|---|---|---|---|\n");
            for r in reports {
                out.push_str(&format!(
                    "| {} | {} | {} | {:.3} | {:.2} |\n",
                    r.kind.context_column(),
                    n_column(&r.kind),
                    prompt_column(&r.kind),
                    r.bert_score,
                    r.bleu
                ));
            }
            if let Some(first) = reports.first() {
                let s = &first.settings;
                out.push_str(&format!(
                    "\nBLEU tokenizer `{}`, smoothing `{}`; BERTScore {} via `{}`.\n",
                    s.bleu_tokenizer, s.bleu_smoothing, s.bert_aggregate, s.embedding_provider
                ));
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::HashEmbedder;

    fn gold() -> Vec<GoldQA> {
        (0..4)
            .map(|i| GoldQA {
                id: format!("q{i}"),
                context_id: "c".into(),
                question: format!("質問{i}"),
                answers: vec![format!("答え{i}です")],
            })
            .collect()
    }

    fn exact(gold: &[GoldQA]) -> Vec<Prediction> {
        gold.iter().map(|g| Prediction { question_id: g.id.clone(), answer: g.answers[0].clone() }).collect()
    }

    fn write_preds(dir: &Path, label: &str, preds: &[Prediction]) {
        jsonl::write_all(&dir.join(format!("{label}.jsonl")), preds).unwrap();
    }

    #[test]
    fn matrix_has_fourteen_rows_in_table_order() {
        let m = full_matrix();
        assert_eq!(m.len(), 14);
        let labels: Vec<_> = m.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(&labels[..5], ["human", "gpt", "news-n1-zero", "wiki-n1-zero", "jsquad-n1-zero"]);
        assert_eq!(labels[13], "jsquad-n3-one");
    }

    #[test]
    fn identity_predictions_score_perfectly() {
        let g = gold();
        let e = HashEmbedder::new(8);
        let r = evaluate_predictions(&RunConfig::new(RunKind::Human), &g, &exact(&g), BleuTokenizer::Char, Smoothing::None, &e).unwrap();
        assert_eq!(r.bleu, 100.0);
        approx::assert_abs_diff_eq!(r.bert_score, 1.0, epsilon = 1e-12);
        assert_eq!(r.n_eval_items, 4);
    }

    #[test]
    fn pairing_reports_unmatched_and_duplicates() {
        let g = gold();
        let mut preds = exact(&g);
        preds.pop();
        preds.push(Prediction { question_id: "q0".into(), answer: "dup".into() });
        preds.push(Prediction { question_id: "ghost".into(), answer: "x".into() });
        let e = HashEmbedder::new(8);
        let r = evaluate_predictions(&RunConfig::new(RunKind::Plain), &g, &preds, BleuTokenizer::Char, Smoothing::None, &e).unwrap();
        assert_eq!(r.n_eval_items, 3);
        assert_eq!(r.unmatched_ids, ["ghost"]);
        assert_eq!(r.duplicate_ids, ["q0"]);
        assert_eq!(r.missing_predictions, 1);
    }

    #[test]
    fn missing_file_is_skipped_and_order_is_restored() {
        let dir = tempfile::tempdir().unwrap();
        let g = gold();
        let m = full_matrix();
        for run in m.iter().rev().skip(1) {
            write_preds(dir.path(), &run.label, &exact(&g));
        }
        let e = HashEmbedder::new(8);
        let mut shuffled = m.clone();
        shuffled.reverse();
        let out = run_matrix(&shuffled, &g, dir.path(), BleuTokenizer::Char, Smoothing::None, &e);
        assert_eq!(out.reports.len(), 13);
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.skipped[0].run, "jsquad-n3-one");
        let got: Vec<_> = out.reports.iter().map(|r| r.run.as_str()).collect();
        let want: Vec<_> = m.iter().take(13).map(|r| r.label.as_str()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn renders() {
        let g = gold();
        let e = HashEmbedder::new(8);
        let reports: Vec<_> = full_matrix()
            .iter()
            .take(2)
            .map(|r| evaluate_predictions(r, &g, &exact(&g), BleuTokenizer::Char, Smoothing::None, &e).unwrap())
            .collect();
        let md = render_report(&reports, ReportFormat::Markdown);
        assert_eq!(md.lines().filter(|l| l.starts_with("| ")).count(), 3);
        assert!(md.contains("| Human | - | - | 1.000 | 100.00 |"));
        let csv = render_report(&reports, ReportFormat::Csv);
        assert!(csv.starts_with("context,N,prompt,bert_score,bleu,"));
        assert_eq!(csv.lines().count(), 3);
        let json = render_report(&reports, ReportFormat::Json);
        let back: Vec<MetricReport> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, reports);
    }
}
