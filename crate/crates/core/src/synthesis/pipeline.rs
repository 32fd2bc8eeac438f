//! Per-context orchestration and the resumable record file.
//!
//! Workers pull contexts through the gateway concurrently. A single writer
//! holds finished records in a reorder buffer and appends them in input
//! order, fsyncing each line, so output bytes do not depend on scheduling.
//!
//! On start the existing file is recovered: a torn final line and any
//! trailing manifest are cut off, and contexts that already have a record
//! are skipped. After the last record a fresh manifest is appended with
//! totals recomputed from every record in the file.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::OpenOptions;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use super::parse::parse_qa_output;
use super::validate::{validate_qa, ValidationPolicy, Verdict};
use super::{
    OutputLine, QAPair, RecordStatus, RejectedPair, RunManifest, RunStats, SynthesisRecord, TokenUsage, RECORD_VERSION,
};
use crate::corpus::ContextDocument;
use crate::gateway::{Gateway, GatewayError, GenerationParams, PriceTable};
use crate::jsonl;
use crate::prompt::{build_synthesis_prompt, FewShotExample, PromptError, PromptMode, TemplateSet};

#[derive(Debug, Clone)]
pub struct SynthesisConfig {
    pub n: usize,
    pub mode: PromptMode,
    pub templates: TemplateSet,
    /// Required for one-shot runs; defaults to the template's own exemplar.
    pub example: Option<FewShotExample>,
    pub generation: GenerationParams,
    pub policy: ValidationPolicy,
    /// Number of contexts in flight at once.
    pub concurrency: usize,
    pub prices: PriceTable,
    pub label: String,
}

impl SynthesisConfig {
    pub fn new(n: usize, mode: PromptMode, templates: TemplateSet) -> Self {
        let example = match mode {
            PromptMode::OneShot => templates.example.clone(),
            PromptMode::ZeroShot => None,
        };
        Self {
            n,
            mode,
            templates,
            example,
            generation: GenerationParams::default(),
            policy: ValidationPolicy::default(),
            concurrency: 4,
            prices: PriceTable::new(),
            label: format!("n{n}-{}", mode.short()),
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("invalid synthesis configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: existing output does not match this run: {message}", path.display())]
    Resume { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    /// Contexts that already had a record before this run.
    pub resumed: usize,
    /// Records written by this run.
    pub written: usize,
    pub manifest: RunManifest,
}

impl RunOutcome {
    /// True when some context did not end with status `ok`.
    pub fn has_failures(&self) -> bool {
        self.manifest.stats.by_status.iter().any(|(s, &c)| *s != RecordStatus::Ok && c > 0)
    }
}

/// Generates one record per context into `out_path`, resuming if the file
/// already holds some of them.
pub fn synthesize_dataset(
    contexts: &[ContextDocument],
    config: &SynthesisConfig,
    gateway: &Gateway,
    out_path: &Path,
) -> Result<RunOutcome, SynthesisError> {
    check_config(contexts, config)?;
    config.generation.validate().map_err(|e| SynthesisError::Config(e.to_string()))?;
    let io_err = |source| SynthesisError::Io { path: out_path.to_path_buf(), source };

    let existing = resume_prefix(contexts, config, out_path)?;
    let done: HashSet<&str> = existing.iter().map(|r| r.context_id.as_str()).collect();
    let todo: Vec<&ContextDocument> = contexts.iter().filter(|c| !done.contains(c.id.as_str())).collect();
    if !existing.is_empty() {
        info!(resumed = existing.len(), remaining = todo.len(), "resuming synthesis run");
    }

    let mut file = OpenOptions::new().create(true).append(true).open(out_path).map_err(io_err)?;
    let mut written = Vec::with_capacity(todo.len());
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let workers = config.concurrency.clamp(1, todo.len().max(1));

    let write_result: Result<(), io::Error> = std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, SynthesisRecord)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, abort, todo) = (&next, &abort, &todo);
            scope.spawn(move || loop {
                if abort.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(ctx) = todo.get(i) else { break };
                let record = process_context(ctx, config, gateway);
                if tx.send((i, record)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending = BTreeMap::new();
        let mut expected = 0usize;
        for (i, record) in rx {
            pending.insert(i, record);
            while let Some(record) = pending.remove(&expected) {
                if let Err(e) = jsonl::append_synced(&mut file, &OutputLine::Record(record.clone())) {
                    abort.store(true, Ordering::Relaxed);
                    return Err(e);
                }
                written.push(record);
                expected += 1;
            }
        }
        Ok(())
    });
    write_result.map_err(io_err)?;

    let all: Vec<&SynthesisRecord> = existing.iter().chain(written.iter()).collect();
    let manifest = RunManifest {
        version: RECORD_VERSION,
        label: config.label.clone(),
        model_id: config.generation.model_id.clone(),
        prompt_mode: config.mode,
        n_requested: config.n,
        template_version: config.templates.version.clone(),
        temperature: config.generation.temperature,
        max_output_tokens: config.generation.max_output_tokens,
        seed: config.generation.seed,
        backend: gateway.backend_id(),
        stats: RunStats::from_records(all.iter().copied(), &config.prices),
    };
    if manifest.stats.cost_estimate.is_none() && !config.prices.is_empty() {
        warn!(model = %manifest.model_id, "no price configured; cost estimate omitted");
    }
    jsonl::append_synced(&mut file, &OutputLine::Manifest(manifest.clone())).map_err(io_err)?;
    Ok(RunOutcome { resumed: existing.len(), written: written.len(), manifest })
}

fn check_config(contexts: &[ContextDocument], config: &SynthesisConfig) -> Result<(), SynthesisError> {
    if config.n == 0 {
        return Err(SynthesisError::Config("n must be at least 1".into()));
    }
    if config.concurrency == 0 {
        return Err(SynthesisError::Config("concurrency must be at least 1".into()));
    }
    let mut seen = HashSet::new();
    for c in contexts {
        if !seen.insert(c.id.as_str()) {
            return Err(SynthesisError::Config(format!("duplicate context id `{}`", c.id)));
        }
    }
    // Surface template/exemplar problems once, before any request is made.
    if let Some(first) = contexts.first() {
        build_synthesis_prompt(&config.templates, first, config.n, config.mode, config.example.as_ref())?;
    }
    Ok(())
}

/// Recovers the complete records already in `path` and truncates the file
/// to just those lines.
fn resume_prefix(
    contexts: &[ContextDocument],
    config: &SynthesisConfig,
    path: &Path,
) -> Result<Vec<SynthesisRecord>, SynthesisError> {
    let bad = |message: String| SynthesisError::Resume { path: path.to_path_buf(), message };
    let recovered = jsonl::recover::<OutputLine>(path).map_err(|source| SynthesisError::Io { path: path.to_path_buf(), source })?;
    let mut keep_len = recovered.good_len;
    let mut records = Vec::new();
    let last = recovered.records.len().saturating_sub(1);
    for (i, (line, start)) in recovered.records.into_iter().zip(recovered.starts).enumerate() {
        match line {
            OutputLine::Record(r) => records.push(r),
            OutputLine::Manifest(_) if i == last => keep_len = start,
            OutputLine::Manifest(_) => return Err(bad(format!("manifest found before the final line (line {})", i + 1))),
        }
    }
    let known: HashSet<&str> = contexts.iter().map(|c| c.id.as_str()).collect();
    let mut seen = HashSet::new();
    for r in &records {
        if !known.contains(r.context_id.as_str()) {
            return Err(bad(format!("record for unknown context `{}`", r.context_id)));
        }
        if !seen.insert(r.context_id.as_str()) {
            return Err(bad(format!("duplicate record for context `{}`", r.context_id)));
        }
        if r.n_requested != config.n || r.prompt_mode != config.mode || r.model_id != config.generation.model_id {
            return Err(bad(format!(
                "record for `{}` was made with n={} mode={} model={}",
                r.context_id,
                r.n_requested,
                r.prompt_mode.as_str(),
                r.model_id
            )));
        }
    }
    if recovered.torn_tail {
        warn!(path = %path.display(), "dropping torn final line");
    }
    let len = std::fs::metadata(path).map(|m| m.len()).unwrap_or(0);
    if keep_len < len {
        let file = OpenOptions::new().write(true).open(path).map_err(|source| SynthesisError::Io { path: path.to_path_buf(), source })?;
        file.set_len(keep_len).and_then(|_| file.sync_all()).map_err(|source| SynthesisError::Io { path: path.to_path_buf(), source })?;
    }
    Ok(records)
}

fn process_context(ctx: &ContextDocument, config: &SynthesisConfig, gateway: &Gateway) -> SynthesisRecord {
    let mut record = SynthesisRecord {
        version: RECORD_VERSION,
        context_id: ctx.id.clone(),
        status: RecordStatus::Ok,
        model_id: config.generation.model_id.clone(),
        prompt_mode: config.mode,
        n_requested: config.n,
        raw_response: String::new(),
        pairs: Vec::new(),
        rejected: Vec::new(),
        usage: TokenUsage::default(),
        attempts: 0,
        error_detail: None,
        warnings: Vec::new(),
    };
    let prompt = match build_synthesis_prompt(&config.templates, ctx, config.n, config.mode, config.example.as_ref()) {
        Ok(p) => p,
        Err(e) => {
            record.status = RecordStatus::LlmFailed;
            record.error_detail = Some(format!("prompt: {e}"));
            return record;
        }
    };
    record.warnings.extend(prompt.warnings.iter().cloned());
    let completion = match gateway.chat_complete(&prompt, &config.generation) {
        Ok(c) => c,
        Err(e) => {
            record.status = RecordStatus::LlmFailed;
            record.attempts = match &e {
                GatewayError::Exhausted { attempts, .. } => *attempts,
                GatewayError::Request(_) => 1,
                _ => 0,
            };
            record.error_detail = Some(e.to_string());
            return record;
        }
    };
    record.raw_response = completion.text;
    record.usage = TokenUsage { prompt_tokens: completion.prompt_tokens, completion_tokens: completion.completion_tokens };
    record.attempts = completion.attempt_count;

    let parsed = match parse_qa_output(&record.raw_response, config.n) {
        Ok(p) => p,
        Err(e) => {
            record.status = RecordStatus::ParseFailed;
            record.error_detail = Some(e.to_string());
            return record;
        }
    };
    record.warnings.extend(parsed.warnings);
    for (question, answer) in parsed.pairs {
        match validate_qa(&question, &answer, ctx, &config.policy) {
            Verdict::Accept => record.pairs.push(QAPair {
                question: question.trim().to_owned(),
                answer: answer.trim().to_owned(),
                context_id: ctx.id.clone(),
                prompt_mode: config.mode,
                n_requested: config.n,
                model_id: config.generation.model_id.clone(),
            }),
            Verdict::Reject(reason) => record.rejected.push(RejectedPair { question, answer, reason }),
        }
    }
    if record.pairs.is_empty() {
        record.status = RecordStatus::ValidationFailed;
        let reasons: Vec<String> = record.rejected.iter().map(|r| r.reason.to_string()).collect();
        record.error_detail = Some(format!("all pairs rejected: {}", reasons.join(", ")));
    }
    record
}

/// Reads a record file, returning the records and the manifest if the run
/// finished.
pub fn read_output(path: &Path) -> io::Result<(Vec<SynthesisRecord>, Option<RunManifest>)> {
    let lines: Vec<OutputLine> = jsonl::read_all(path)?;
    let mut records = Vec::new();
    let mut manifest = None;
    for line in lines {
        match line {
            OutputLine::Record(r) => records.push(r),
            OutputLine::Manifest(m) => manifest = Some(m),
        }
    }
    Ok((records, manifest))
}

/// Accepted pairs grouped by context id, for downstream consumers.
pub fn accepted_pairs(records: &[SynthesisRecord]) -> HashMap<&str, &[QAPair]> {
    records.iter().filter(|r| !r.pairs.is_empty()).map(|r| (r.context_id.as_str(), r.pairs.as_slice())).collect()
}
