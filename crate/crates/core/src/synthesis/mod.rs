//! QA synthesis: prompt, call, parse, validate, persist.
//!
//! Output is JSON Lines. Every line carries a `type` tag:
//!
//! * `"record"`: one [`SynthesisRecord`] per input context, in input order;
//! * `"manifest"`: a single terminal [`RunManifest`] with totals recomputed
//!   from the records in the file.
//!
//! Both carry `version` ([`RECORD_VERSION`]).

pub mod parse;
pub mod pipeline;
pub mod validate;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::gateway::{estimate_cost, PriceTable, Usage};
use crate::prompt::PromptMode;
pub use parse::{parse_qa_output, ParsedOutput, QaParseError, Repair};
pub use pipeline::{read_output, synthesize_dataset, RunOutcome, SynthesisConfig, SynthesisError};
pub use validate::{bigram_overlap, validate_qa, RejectReason, ValidationPolicy, Verdict};

pub const RECORD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    pub answer: String,
    pub context_id: String,
    pub prompt_mode: PromptMode,
    pub n_requested: usize,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedPair {
    pub question: String,
    pub answer: String,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    ParseFailed,
    ValidationFailed,
    LlmFailed,
}

impl RecordStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordStatus::Ok => "ok",
            RecordStatus::ParseFailed => "parse_failed",
            RecordStatus::ValidationFailed => "validation_failed",
            RecordStatus::LlmFailed => "llm_failed",
        }
    }
}

impl fmt::Display for RecordStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    pub version: u32,
    pub context_id: String,
    pub status: RecordStatus,
    pub model_id: String,
    pub prompt_mode: PromptMode,
    pub n_requested: usize,
    pub raw_response: String,
    pub pairs: Vec<QAPair>,
    #[serde(default)]
    pub rejected: Vec<RejectedPair>,
    pub usage: TokenUsage,
    /// Backend calls made for this context, retries included.
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_detail: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub contexts_processed: usize,
    pub by_status: BTreeMap<RecordStatus, usize>,
    pub pairs_accepted: usize,
    pub pairs_rejected: BTreeMap<RejectReason, usize>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub attempts: u64,
    /// `None` when the price table lacks the model.
    pub cost_estimate: Option<f64>,
}

impl RunStats {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a SynthesisRecord>, prices: &PriceTable) -> Self {
        let mut stats = RunStats {
            contexts_processed: 0,
            by_status: BTreeMap::new(),
            pairs_accepted: 0,
            pairs_rejected: BTreeMap::new(),
            prompt_tokens: 0,
            completion_tokens: 0,
            attempts: 0,
            cost_estimate: None,
        };
        let mut usage = Vec::new();
        for r in records {
            stats.contexts_processed += 1;
            *stats.by_status.entry(r.status).or_default() += 1;
            stats.pairs_accepted += r.pairs.len();
            for rej in &r.rejected {
                *stats.pairs_rejected.entry(rej.reason).or_default() += 1;
            }
            stats.prompt_tokens += r.usage.prompt_tokens;
            stats.completion_tokens += r.usage.completion_tokens;
            stats.attempts += u64::from(r.attempts);
            usage.push(Usage {
                model_id: r.model_id.clone(),
                prompt_tokens: r.usage.prompt_tokens,
                completion_tokens: r.usage.completion_tokens,
            });
        }
        stats.cost_estimate = estimate_cost(&usage, prices).ok();
        stats
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub label: String,
    pub model_id: String,
    pub prompt_mode: PromptMode,
    pub n_requested: usize,
    pub template_version: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub seed: Option<u64>,
    pub backend: String,
    pub stats: RunStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OutputLine {
    Record(SynthesisRecord),
    Manifest(RunManifest),
}
