//! Deterministic offline backend driven by a response script.
//!
//! A script is JSONL, one [`MockEntry`] per line. For each prompt the
//! backend picks, in order: the entry whose `prompt_sha256` equals the
//! SHA-256 of [`PromptSpec::rendered_text`], the first entry whose
//! `contains` substring occurs in the prompt, then the first entry with
//! neither key (the fallback). An entry's `failures` are replayed, one per
//! attempt, for every distinct prompt it serves before the response is
//! returned. Token counts default to the Unicode scalar counts of the
//! prompt and response.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, ChatBackend, GenerationParams, RawCompletion};
use crate::prompt::PromptSpec;

/// One scripted failed attempt: an HTTP status code, `"timeout"` or `"transport"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "FailureRepr", into = "FailureRepr")]
pub enum MockFailure {
    Status(u16),
    Timeout,
    Transport,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FailureRepr {
    Code(u16),
    Named(NamedFailure),
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum NamedFailure {
    Timeout,
    Transport,
}

impl From<FailureRepr> for MockFailure {
    fn from(r: FailureRepr) -> Self {
        match r {
            FailureRepr::Code(c) => MockFailure::Status(c),
            FailureRepr::Named(NamedFailure::Timeout) => MockFailure::Timeout,
            FailureRepr::Named(NamedFailure::Transport) => MockFailure::Transport,
        }
    }
}

impl From<MockFailure> for FailureRepr {
    fn from(f: MockFailure) -> Self {
        match f {
            MockFailure::Status(c) => FailureRepr::Code(c),
            MockFailure::Timeout => FailureRepr::Named(NamedFailure::Timeout),
            MockFailure::Transport => FailureRepr::Named(NamedFailure::Transport),
        }
    }
}

impl MockFailure {
    fn to_error(&self) -> BackendError {
        match self {
            MockFailure::Status(status) => BackendError::Status { status: *status, body: "scripted failure".into() },
            MockFailure::Timeout => BackendError::Timeout,
            MockFailure::Transport => BackendError::Transport("scripted failure".into()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    pub response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<MockFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_ms: Option<u64>,
}

impl MockEntry {
    pub fn fallback(response: impl Into<String>) -> Self {
        Self { response: response.into(), ..Default::default() }
    }

    pub fn contains(needle: impl Into<String>, response: impl Into<String>) -> Self {
        Self { contains: Some(needle.into()), response: response.into(), ..Default::default() }
    }

    pub fn for_prompt(prompt: &PromptSpec, response: impl Into<String>) -> Self {
        Self { prompt_sha256: Some(prompt_hash(prompt)), response: response.into(), ..Default::default() }
    }

    pub fn with_failures(mut self, failures: Vec<MockFailure>) -> Self {
        self.failures = failures;
        self
    }

    pub fn with_delay_ms(mut self, ms: u64) -> Self {
        self.delay_ms = Some(ms);
        self
    }
}

/// Hex SHA-256 of the rendered prompt text.
pub fn prompt_hash(prompt: &PromptSpec) -> String {
    hex::encode(Sha256::digest(prompt.rendered_text().as_bytes()))
}

#[derive(Debug, Default)]
pub struct MockBackend {
    entries: Vec<MockEntry>,
    by_hash: HashMap<String, usize>,
    attempts: Mutex<HashMap<String, usize>>,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl MockBackend {
    pub fn new(entries: Vec<MockEntry>) -> Self {
        let mut by_hash = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if let Some(h) = &e.prompt_sha256 {
                by_hash.entry(h.to_ascii_lowercase()).or_insert(i);
            }
        }
        Self { entries, by_hash, ..Default::default() }
    }

    pub fn from_script(path: &Path) -> std::io::Result<Self> {
        Ok(Self::new(crate::jsonl::read_all(path)?))
    }

    pub fn total_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Attempts seen for one prompt.
    pub fn calls_for(&self, prompt: &PromptSpec) -> usize {
        self.attempts.lock().unwrap().get(&prompt_hash(prompt)).copied().unwrap_or(0)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    fn lookup(&self, hash: &str, text: &str) -> Option<&MockEntry> {
        if let Some(&i) = self.by_hash.get(hash) {
            return Some(&self.entries[i]);
        }
        self.entries
            .iter()
            .find(|e| e.prompt_sha256.is_none() && e.contains.as_deref().is_some_and(|c| text.contains(c)))
            .or_else(|| self.entries.iter().find(|e| e.prompt_sha256.is_none() && e.contains.is_none()))
    }
}

struct InFlightGuard<'a>(&'a AtomicUsize);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, prompt: &PromptSpec, _params: &GenerationParams) -> Result<RawCompletion, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        let _guard = InFlightGuard(&self.in_flight);

        let text = prompt.rendered_text();
        let hash = prompt_hash(prompt);
        let attempt = {
            let mut seen = self.attempts.lock().unwrap();
            let n = seen.entry(hash.clone()).or_insert(0);
            *n += 1;
            *n
        };
        let entry = self.lookup(&hash, &text).ok_or_else(|| BackendError::Status {
            status: 400,
            body: format!("mock: no scripted response for prompt {hash}"),
        })?;
        if let Some(ms) = entry.delay_ms {
            std::thread::sleep(Duration::from_millis(ms));
        }
        if let Some(f) = entry.failures.get(attempt - 1) {
            return Err(f.to_error());
        }
        Ok(RawCompletion {
            text: entry.response.clone(),
            prompt_tokens: entry.prompt_tokens.unwrap_or(text.chars().count() as u64),
            completion_tokens: entry.completion_tokens.unwrap_or(entry.response.chars().count() as u64),
        })
    }

    fn describe(&self) -> String {
        format!("mock({} entries)", self.entries.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn script_lines_parse() {
        let lines = [
            r#"{"response":"fallback"}"#,
            r#"{"contains":"x","response":"r","failures":[429,"timeout"]}"#,
        ];
        let entries: Vec<MockEntry> = lines.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(entries[1].failures, vec![MockFailure::Status(429), MockFailure::Timeout]);
        assert!(entries[0].contains.is_none());
    }

    #[test]
    fn unscripted_prompt_is_a_permanent_error() {
        let mock = MockBackend::new(vec![MockEntry::contains("needle", "r")]);
        let p = crate::prompt::PromptSpec {
            messages: vec![crate::prompt::Message { role: crate::prompt::Role::User, content: "hay".into() }],
            mode: crate::prompt::PromptMode::ZeroShot,
            n_pairs: 1,
            template_version: "t".into(),
            warnings: vec![],
        };
        let err = mock.complete(&p, &GenerationParams::default()).unwrap_err();
        assert!(!err.is_retryable());
        let hashed = MockBackend::new(vec![MockEntry::for_prompt(&p, "exact"), MockEntry::fallback("f")]);
        assert_eq!(hashed.complete(&p, &GenerationParams::default()).unwrap().text, "exact");
        assert_eq!(hashed.calls_for(&p), 1);
    }
}
