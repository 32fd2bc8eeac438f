//! Turning a model's free-form reply into question/answer pairs.
//!
//! Recovery runs a fixed ladder and stops at the first step that yields a
//! JSON value:
//!
//! 1. the trimmed reply parsed as JSON;
//! 2. the body of the first ```` ``` ```` fenced block (an optional language
//!    tag on the opening fence line is dropped);
//! 3. the first balanced `{…}` or `[…]` span, scanning left to right and
//!    respecting JSON string quoting, that parses as JSON.
//!
//! The value is then read as one pair object or an array of pair objects.
//! `Question`/`Answer` keys match case-insensitively. A single object
//! where several pairs were requested is taken as a list of one; an array
//! longer than requested is truncated with a warning; a shorter one is
//! accepted with a warning.

use std::fmt;

use serde_json::{Map, Value};
use thiserror::Error;

/// Which ladder step recovered the JSON.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Repair {
    Direct,
    Fenced,
    Extracted,
}

impl fmt::Display for Repair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Repair::Direct => "direct",
            Repair::Fenced => "fenced",
            Repair::Extracted => "extracted",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedOutput {
    pub pairs: Vec<(String, String)>,
    pub repair: Repair,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QaParseError {
    #[error("no JSON recovered ({})", trace.join("; "))]
    NoJson { trace: Vec<String> },
    #[error("missing key `{key}` in {location}")]
    MissingKey { key: &'static str, location: String },
    #[error("schema error: {0}")]
    Schema(String),
}

pub fn parse_qa_output(raw: &str, expected_n: usize) -> Result<ParsedOutput, QaParseError> {
    if expected_n == 0 {
        return Err(QaParseError::Schema("expected pair count must be at least 1".into()));
    }
    let (value, repair) = recover_json(raw)?;
    let mut warnings = Vec::new();
    let items: Vec<&Map<String, Value>> = match &value {
        Value::Object(obj) => vec![obj],
        Value::Array(items) => {
            if items.is_empty() {
                return Err(QaParseError::Schema("empty array".into()));
            }
            items
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    v.as_object().ok_or_else(|| QaParseError::Schema(format!("element {i} is not an object")))
                })
                .collect::<Result<_, _>>()?
        }
        other => return Err(QaParseError::Schema(format!("expected an object or array, found {}", kind(other)))),
    };
    if items.len() > expected_n {
        warnings.push(format!("model returned {} pairs, keeping the first {expected_n}", items.len()));
    } else if items.len() < expected_n {
        warnings.push(format!("model returned {} pairs, {expected_n} requested", items.len()));
    }
    let multi = matches!(value, Value::Array(_));
    let mut pairs = Vec::with_capacity(expected_n.min(items.len()));
    for (i, obj) in items.into_iter().take(expected_n).enumerate() {
        let location = if multi { format!("element {i}") } else { "object".to_owned() };
        let question = string_key(obj, "question", "Question", &location)?;
        let answer = string_key(obj, "answer", "Answer", &location)?;
        pairs.push((question, answer));
    }
    Ok(ParsedOutput { pairs, repair, warnings })
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

fn string_key(obj: &Map<String, Value>, lower: &str, display: &'static str, location: &str) -> Result<String, QaParseError> {
    let value = obj
        .iter()
        .find(|(k, _)| k.trim().eq_ignore_ascii_case(lower))
        .map(|(_, v)| v)
        .ok_or_else(|| QaParseError::MissingKey { key: display, location: location.to_owned() })?;
    match value {
        Value::String(s) => Ok(s.clone()),
        other => Err(QaParseError::Schema(format!("`{display}` in {location} is {}, not a string", kind(other)))),
    }
}

fn recover_json(raw: &str) -> Result<(Value, Repair), QaParseError> {
    let mut trace = Vec::new();
    match serde_json::from_str::<Value>(raw.trim()) {
        Ok(v) => return Ok((v, Repair::Direct)),
        Err(e) => trace.push(format!("direct: {e}")),
    }
    match fenced_body(raw) {
        Some(body) => match serde_json::from_str::<Value>(body.trim()) {
            Ok(v) => return Ok((v, Repair::Fenced)),
            Err(e) => trace.push(format!("fenced: {e}")),
        },
        None => trace.push("fenced: no code fence".into()),
    }
    match balanced_json(raw) {
        Some(v) => Ok((v, Repair::Extracted)),
        None => {
            trace.push("extracted: no balanced JSON span".into());
            Err(QaParseError::NoJson { trace })
        }
    }
}

fn fenced_body(raw: &str) -> Option<&str> {
    let start = raw.find("```")?;
    let after = &raw[start + 3..];
    // drop a language tag such as ```json
    let body_start = match after.find('\n') {
        Some(nl) if after[..nl].trim().chars().all(|c| c.is_ascii_alphanumeric()) => nl + 1,
        _ => 0,
    };
    let body = &after[body_start..];
    let end = body.find("```").unwrap_or(body.len());
    Some(&body[..end])
}

/// End offset (exclusive) of the balanced span opening at `start`.
fn span_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut stack = Vec::new();
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => stack.push(b'}'),
            b'[' => stack.push(b']'),
            b'}' | b']' => {
                if stack.pop() != Some(b) {
                    return None;
                }
                if stack.is_empty() {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

// Prefers the first span shaped like pair data (an object, or a non-empty
// array of objects); otherwise returns the first span that parses at all.
fn balanced_json(raw: &str) -> Option<Value> {
    let bytes = raw.as_bytes();
    let mut first_parsed = None;
    for start in (0..bytes.len()).filter(|&i| bytes[i] == b'{' || bytes[i] == b'[') {
        let Some(end) = span_end(bytes, start) else { continue };
        let Ok(v) = serde_json::from_str::<Value>(&raw[start..end]) else { continue };
        let pair_shaped = match &v {
            Value::Object(_) => true,
            Value::Array(items) => !items.is_empty() && items.iter().all(Value::is_object),
            _ => false,
        };
        if pair_shaped {
            return Some(v);
        }
        first_parsed.get_or_insert(v);
    }
    first_parsed
}
