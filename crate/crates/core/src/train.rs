//! Fine-tuning files and the LoRA hyperparameter grid.
//!
//! Each training line is `{"prompt", "response", "context_id"}`: the
//! rendered answer prompt (ending at the `## Response` header), the answer
//! string as the supervision target, and the source context for audit.

use std::collections::HashMap;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ContextDocument, GoldQA};
use crate::jsonl;
use crate::prompt::{build_answer_prompt, PromptError, TemplateSet};
use crate::synthesis::SynthesisRecord;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub prompt: String,
    pub response: String,
    pub context_id: String,
}

/// Where training pairs come from.
#[derive(Debug, Clone, Copy)]
pub enum TrainSource<'a> {
    /// Accepted pairs from synthesis records. The prompt uses the truncated
    /// context the generator saw.
    Synthesized(&'a [SynthesisRecord]),
    /// Human-written pairs. The prompt uses the full context and the first
    /// gold answer.
    Gold(&'a [GoldQA]),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("pair references unknown context `{0}`")]
    UnknownContext(String),
    #[error("gold question `{0}` has no answer")]
    NoAnswer(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

/// Renders every pair in `source` without writing anything.
pub fn training_examples(
    source: TrainSource<'_>,
    contexts: &[ContextDocument],
    templates: &TemplateSet,
) -> Result<Vec<TrainExample>, TrainError> {
    let by_id: HashMap<&str, &ContextDocument> = contexts.iter().map(|c| (c.id.as_str(), c)).collect();
    let lookup = |id: &str| by_id.get(id).copied().ok_or_else(|| TrainError::UnknownContext(id.to_owned()));
    let mut out = Vec::new();
    match source {
        TrainSource::Synthesized(records) => {
            for pair in records.iter().flat_map(|r| &r.pairs) {
                let ctx = lookup(&pair.context_id)?;
                let prompt = build_answer_prompt(templates, &pair.question, &ctx.truncated)?;
                out.push(TrainExample {
                    prompt: prompt.rendered_text(),
                    response: pair.answer.clone(),
                    context_id: ctx.id.clone(),
                });
            }
        }
        TrainSource::Gold(gold) => {
            for qa in gold {
                let ctx = lookup(&qa.context_id)?;
                let answer = qa.answers.first().ok_or_else(|| TrainError::NoAnswer(qa.id.clone()))?;
                let prompt = build_answer_prompt(templates, &qa.question, &ctx.text)?;
                out.push(TrainExample { prompt: prompt.rendered_text(), response: answer.clone(), context_id: ctx.id.clone() });
            }
        }
    }
    Ok(out)
}

/// Writes one JSONL line per pair and returns the count. Nothing is written
/// if any pair fails to resolve.
pub fn emit_training_file(
    source: TrainSource<'_>,
    contexts: &[ContextDocument],
    templates: &TemplateSet,
    path: &Path,
) -> Result<usize, TrainError> {
    let examples = training_examples(source, contexts, templates)?;
    jsonl::write_all(path, &examples).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: u32,
    pub learning_rate: f64,
    pub epochs: u32,
    pub lora_r: u32,
    pub lora_alpha: u32,
}

/// Value sets for the grid search. `Default` gives the original search
/// space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub batch_size: Vec<u32>,
    pub learning_rate: Vec<f64>,
    pub epochs: Vec<u32>,
    pub lora_r: Vec<u32>,
    pub lora_alpha: Vec<u32>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            batch_size: vec![4, 8],
            learning_rate: vec![1e-5, 5e-5, 1e-6],
            epochs: vec![3, 4, 5],
            lora_r: vec![4, 8, 16, 64, 128],
            lora_alpha: vec![1, 4, 16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GridError {
    #[error("grid set `{0}` is empty")]
    EmptySet(&'static str),
    #[error("grid set `{0}` contains a non-positive or non-finite value")]
    BadValue(&'static str),
}

fn sorted_u32(name: &'static str, values: &[u32]) -> Result<Vec<u32>, GridError> {
    if values.is_empty() {
        return Err(GridError::EmptySet(name));
    }
    if values.contains(&0) {
        return Err(GridError::BadValue(name));
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    v.dedup();
    Ok(v)
}

/// Cartesian product of the sets, each sorted ascending with duplicates
/// removed, in lexicographic order over
/// (batch_size, learning_rate, epochs, lora_r, lora_alpha).
pub fn emit_hyperparam_grid(spec: &GridSpec) -> Result<Vec<TrainConfig>, GridError> {
    let batch = sorted_u32("batch_size", &spec.batch_size)?;
    let epochs = sorted_u32("epochs", &spec.epochs)?;
    let rank = sorted_u32("lora_r", &spec.lora_r)?;
    let alpha = sorted_u32("lora_alpha", &spec.lora_alpha)?;
    if spec.learning_rate.is_empty() {
        return Err(GridError::EmptySet("learning_rate"));
    }
    if spec.learning_rate.iter().any(|&lr| !(lr.is_finite() && lr > 0.0)) {
        return Err(GridError::BadValue("learning_rate"));
    }
    let mut lrs = spec.learning_rate.clone();
    lrs.sort_by(f64::total_cmp);
    lrs.dedup();

    let mut out = Vec::with_capacity(batch.len() * lrs.len() * epochs.len() * rank.len() * alpha.len());
    for &batch_size in &batch {
        for &learning_rate in &lrs {
            for &e in &epochs {
                for &lora_r in &rank {
                    for &lora_alpha in &alpha {
                        out.push(TrainConfig { batch_size, learning_rate, epochs: e, lora_r, lora_alpha });
                    }
                }
            }
        }
    }
    Ok(out)
}
