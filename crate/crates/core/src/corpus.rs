//! Context documents: loading SQuAD-layout and JSONL corpora, seeded
//! sampling and character-limited truncation.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::sampling;

/// Default context length, in Unicode scalar values.
pub const DEFAULT_TRUNCATION: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    News,
    Wiki,
    Jsquad,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::News, Source::Wiki, Source::Jsquad];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::News => "news",
            Source::Wiki => "wiki",
            Source::Jsquad => "jsquad",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "news" => Ok(Source::News),
            "wiki" => Ok(Source::Wiki),
            "jsquad" => Ok(Source::Jsquad),
            other => Err(format!("unknown context source `{other}` (expected news, wiki or jsquad)")),
        }
    }
}

/// One source passage. `truncated` is always a prefix of `text`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextDocument {
    pub id: String,
    pub source: Source,
    #[serde(default)]
    pub title: Option<String>,
    pub text: String,
    pub truncated: String,
}

impl ContextDocument {
    pub fn new(id: impl Into<String>, source: Source, title: Option<String>, text: impl Into<String>) -> Self {
        Self::with_limit(id, source, title, text, DEFAULT_TRUNCATION)
    }

    pub fn with_limit(
        id: impl Into<String>,
        source: Source,
        title: Option<String>,
        text: impl Into<String>,
        limit: usize,
    ) -> Self {
        let text = text.into();
        let truncated = truncate_context(&text, limit).to_owned();
        Self { id: id.into(), source, title, text, truncated }
    }
}

/// A human-authored reference question with its accepted answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldQA {
    pub id: String,
    pub context_id: String,
    pub question: String,
    pub answers: Vec<String>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON at byte {offset} (line {line}, column {column}): {message}")]
    Json { offset: usize, line: usize, column: usize, message: String },
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("duplicate id `{id}` on lines {first} and {second}")]
    DuplicateId { id: String, first: usize, second: usize },
    #[error("cannot sample {requested} documents from a corpus of {available}")]
    SampleSize { requested: usize, available: usize },
    #[error("document `{id}`: truncated text is not a prefix of text")]
    BadTruncation { id: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_owned(), source }
}

/// Longest prefix of `text` holding at most `limit` Unicode scalar values.
pub fn truncate_context(text: &str, limit: usize) -> &str {
    match text.char_indices().nth(limit) {
        Some((byte, _)) => &text[..byte],
        None => text,
    }
}

/// Loads a SQuAD-layout file (`data[].paragraphs[].{context, qas}`).
///
/// Paragraphs with byte-identical `context` collapse into one document that
/// keeps the id of its first occurrence. Questions flagged `is_impossible`
/// are skipped.
pub fn load_squad_json(path: &Path) -> Result<(Vec<ContextDocument>, Vec<GoldQA>), CorpusError> {
    let raw = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_squad_str(&raw, DEFAULT_TRUNCATION)
}

pub fn parse_squad_str(raw: &str, limit: usize) -> Result<(Vec<ContextDocument>, Vec<GoldQA>), CorpusError> {
    let root: Value = serde_json::from_str(raw).map_err(|e| json_error(raw, &e))?;

    let data = field(&root, "data", "$")?
        .as_array()
        .ok_or_else(|| schema("$.data", "expected an array"))?;

    let mut docs: Vec<ContextDocument> = Vec::new();
    let mut by_text: HashMap<String, usize> = HashMap::new();
    let mut gold = Vec::new();

    for (ai, article) in data.iter().enumerate() {
        let apath = format!("$.data[{ai}]");
        let title = article.get("title").and_then(Value::as_str).map(str::to_owned);
        let paragraphs = field(article, "paragraphs", &apath)?
            .as_array()
            .ok_or_else(|| schema(&format!("{apath}.paragraphs"), "expected an array"))?;
        for (pi, para) in paragraphs.iter().enumerate() {
            let ppath = format!("{apath}.paragraphs[{pi}]");
            let context = str_field(para, "context", &ppath)?;
            let qas = field(para, "qas", &ppath)?
                .as_array()
                .ok_or_else(|| schema(&format!("{ppath}.qas"), "expected an array"))?;

            let doc_idx = *by_text.entry(context.to_owned()).or_insert_with(|| {
                docs.push(ContextDocument::with_limit(
                    format!("jsquad-{ai}-{pi}"),
                    Source::Jsquad,
                    title.clone(),
                    context,
                    limit,
                ));
                docs.len() - 1
            });
            let context_id = docs[doc_idx].id.clone();

            for (qi, qa) in qas.iter().enumerate() {
                let qpath = format!("{ppath}.qas[{qi}]");
                if qa.get("is_impossible").and_then(Value::as_bool) == Some(true) {
                    continue;
                }
                let id = match qa.get("id") {
                    Some(Value::String(s)) => s.clone(),
                    Some(Value::Number(n)) => n.to_string(),
                    Some(_) => return Err(schema(&format!("{qpath}.id"), "expected a string")),
                    None => return Err(schema(&format!("{qpath}.id"), "missing required key")),
                };
                let question = str_field(qa, "question", &qpath)?;
                if question.trim().is_empty() {
                    return Err(schema(&format!("{qpath}.question"), "empty question"));
                }
                let answers_v = field(qa, "answers", &qpath)?
                    .as_array()
                    .ok_or_else(|| schema(&format!("{qpath}.answers"), "expected an array"))?;
                let mut answers = Vec::with_capacity(answers_v.len());
                for (xi, ans) in answers_v.iter().enumerate() {
                    let apath = format!("{qpath}.answers[{xi}]");
                    let text = match ans {
                        Value::String(s) => s.as_str(),
                        _ => str_field(ans, "text", &apath)?,
                    };
                    if text.trim().is_empty() {
                        return Err(schema(&format!("{apath}.text"), "empty answer"));
                    }
                    answers.push(text.to_owned());
                }
                if answers.is_empty() {
                    return Err(schema(&format!("{qpath}.answers"), "no answers"));
                }
                gold.push(GoldQA { id, context_id: context_id.clone(), question: question.to_owned(), answers });
            }
        }
    }
    Ok((docs, gold))
}

fn schema(path: &str, message: &str) -> CorpusError {
    CorpusError::Schema { path: path.to_owned(), message: message.to_owned() }
}

fn field<'a>(v: &'a Value, key: &str, parent: &str) -> Result<&'a Value, CorpusError> {
    v.get(key).ok_or_else(|| schema(&format!("{parent}.{key}"), "missing required key"))
}

fn str_field<'a>(v: &'a Value, key: &str, parent: &str) -> Result<&'a str, CorpusError> {
    field(v, key, parent)?
        .as_str()
        .ok_or_else(|| schema(&format!("{parent}.{key}"), "expected a string"))
}

fn json_error(raw: &str, e: &serde_json::Error) -> CorpusError {
    let (line, column) = (e.line(), e.column());
    CorpusError::Json { offset: byte_offset(raw, line, column), line, column, message: e.to_string() }
}

// serde_json reports 1-based lines and 1-based byte columns.
fn byte_offset(raw: &str, line: usize, column: usize) -> usize {
    let line_start: usize = raw
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(raw.len())
}

/// Loads a raw JSONL corpus (`id`, `text`, optional `title` per line).
pub fn load_jsonl_corpus(path: &Path, source: Source) -> Result<Vec<ContextDocument>, CorpusError> {
    let raw = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_jsonl_corpus(&raw, source, DEFAULT_TRUNCATION)
}

pub fn parse_jsonl_corpus(raw: &str, source: Source, limit: usize) -> Result<Vec<ContextDocument>, CorpusError> {
    let mut docs = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in raw.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let line_err = |message: String| CorpusError::Line { line: line_no, message };
        let value: Value = serde_json::from_str(line).map_err(|e| line_err(e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| line_err("expected a JSON object".into()))?;
        let get_str = |key: &str| -> Result<String, CorpusError> {
            match obj.get(key) {
                Some(Value::String(s)) => Ok(s.clone()),
                Some(Value::Number(n)) if key == "id" => Ok(n.to_string()),
                Some(_) => Err(line_err(format!("field {key} must be a string"))),
                None => Err(line_err(format!("missing field {key}"))),
            }
        };
        let text = get_str("text")?;
        let id = get_str("id")?;
        let title = match obj.get("title") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(line_err("field title must be a string".into())),
        };
        if let Some(&first) = seen.get(&id) {
            return Err(CorpusError::DuplicateId { id, first, second: line_no });
        }
        seen.insert(id.clone(), line_no);
        docs.push(ContextDocument::with_limit(id, source, title, text, limit));
    }
    Ok(docs)
}

/// Seeded uniform sample without replacement that keeps input order.
/// See [`crate::sampling`] for the exact scheme.
pub fn sample_contexts(docs: &[ContextDocument], k: usize, seed: u64) -> Result<Vec<ContextDocument>, CorpusError> {
    let picked = sampling::sample_indices(docs.len(), k, seed)
        .ok_or(CorpusError::SampleSize { requested: k, available: docs.len() })?;
    Ok(picked.into_iter().map(|i| docs[i].clone()).collect())
}

/// Writes the canonical corpus JSONL (`id`, `source`, `title`, `text`, `truncated`).
pub fn write_corpus(path: &Path, docs: &[ContextDocument]) -> Result<usize, CorpusError> {
    crate::jsonl::write_all(path, docs).map_err(io_err(path))
}

/// Reads a canonical corpus file, checking ids are unique and every
/// `truncated` is a prefix of its `text`.
pub fn read_corpus(path: &Path) -> Result<Vec<ContextDocument>, CorpusError> {
    let raw = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut docs = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: ContextDocument =
            serde_json::from_str(line).map_err(|e| CorpusError::Line { line: i + 1, message: e.to_string() })?;
        if !doc.text.starts_with(&doc.truncated) {
            return Err(CorpusError::BadTruncation { id: doc.id });
        }
        if let Some(&first) = seen.get(&doc.id) {
            return Err(CorpusError::DuplicateId { id: doc.id, first, second: i + 1 });
        }
        seen.insert(doc.id.clone(), i + 1);
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_gold(path: &Path, gold: &[GoldQA]) -> Result<usize, CorpusError> {
    crate::jsonl::write_all(path, gold).map_err(io_err(path))
}

pub fn read_gold(path: &Path) -> Result<Vec<GoldQA>, CorpusError> {
    crate::jsonl::read_all(path).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(id: &str) -> ContextDocument {
        ContextDocument::new(id, Source::Wiki, None, format!("text of {id}"))
    }

    #[test]
    fn short_text_is_unchanged() {
        let text: String = "あ".repeat(250);
        assert_eq!(truncate_context(&text, 300), text);
    }

    #[test]
    fn long_text_keeps_first_300_scalars() {
        let text: String = (0..500).map(|i| char::from_u32(0x3041 + (i % 80)).unwrap()).collect();
        let out = truncate_context(&text, 300);
        assert_eq!(out.chars().count(), 300);
        assert!(text.starts_with(out));
    }

    #[test]
    fn multibyte_after_ascii_boundary() {
        let mut text = "a".repeat(300);
        text.push('語');
        let out = truncate_context(&text, 300);
        // independent scalar count over the raw bytes: every byte that is
        // not a UTF-8 continuation byte starts a scalar
        let scalars = out.bytes().filter(|b| (b & 0xC0) != 0x80).count();
        assert_eq!(scalars, 300);
        assert_eq!(out, "a".repeat(300));
        assert_eq!(text.len(), 303);

        let mut text = "語".repeat(300);
        text.push('a');
        let out = truncate_context(&text, 300);
        assert_eq!(out.len(), 900);
        assert_eq!(out.bytes().filter(|b| (b & 0xC0) != 0x80).count(), 300);
    }

    #[test]
    fn squad_counts_and_dedup() {
        let raw = r#"{"data":[
            {"title":"A","paragraphs":[
                {"context":"c1","qas":[{"id":"q1","question":"Q1","answers":[{"text":"a1","answer_start":0}]},
                                        {"id":"q2","question":"Q2","answers":[{"text":"a2","answer_start":0}]}]},
                {"context":"c2","qas":[{"id":"q3","question":"Q3","answers":[{"text":"a3","answer_start":0}]}]}]},
            {"title":"B","paragraphs":[
                {"context":"c3","qas":[{"id":"q4","question":"Q4","answers":[{"text":"a4","answer_start":0}]},
                                        {"id":"q5","question":"Q5","answers":[{"text":"a5","answer_start":0}]}]}]}]}"#;
        let (docs, gold) = parse_squad_str(raw, 300).unwrap();
        assert_eq!(docs.len(), 3);
        assert_eq!(gold.len(), 5);
        assert!(docs.iter().all(|d| d.source == Source::Jsquad));
    }

    #[test]
    fn squad_identical_contexts_merge() {
        let raw = r#"{"data":[{"title":"A","paragraphs":[
            {"context":"same","qas":[{"id":"q1","question":"Q1","answers":[{"text":"a"}]}]},
            {"context":"same","qas":[{"id":"q2","question":"Q2","answers":[{"text":"b"}]}]}]}]}"#;
        let (docs, gold) = parse_squad_str(raw, 300).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(gold.len(), 2);
        assert!(gold.iter().all(|g| g.context_id == docs[0].id));
        assert_eq!(docs[0].id, "jsquad-0-0");
    }

    #[test]
    fn squad_malformed_json_reports_offset() {
        let raw = "{\"data\": [\n  {\"title\": }\n]}";
        match parse_squad_str(raw, 300).unwrap_err() {
            CorpusError::Json { offset, line, .. } => {
                assert_eq!(line, 2);
                assert_eq!(&raw[offset..offset + 1], "}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn squad_missing_key_names_path() {
        let raw = r#"{"data":[{"title":"A","paragraphs":[{"context":"c","qas":[{"id":"q","question":"Q"}]}]}]}"#;
        let err = parse_squad_str(raw, 300).unwrap_err();
        assert_eq!(err.to_string(), "schema error at $.data[0].paragraphs[0].qas[0].answers: missing required key");
    }

    #[test]
    fn jsonl_in_order_with_blank_lines() {
        let raw = "{\"id\":\"a\",\"text\":\"x\"}\n\n{\"id\":\"b\",\"text\":\"y\",\"title\":\"T\"}\n{\"id\":\"c\",\"text\":\"z\"}\n";
        let docs = parse_jsonl_corpus(raw, Source::News, 300).unwrap();
        let ids: Vec<_> = docs.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(docs[1].title.as_deref(), Some("T"));
    }

    #[test]
    fn jsonl_missing_text() {
        let raw = "{\"id\":\"a\",\"text\":\"x\"}\n{}\n";
        let err = parse_jsonl_corpus(raw, Source::News, 300).unwrap_err();
        assert_eq!(err.to_string(), "line 2: missing field text");
        let raw = "{\"id\":\"a\",\"text\":\"x\"}\n{\"text\":\"b\"}\n";
        let err = parse_jsonl_corpus(raw, Source::News, 300).unwrap_err();
        assert_eq!(err.to_string(), "line 2: missing field id");
    }

    #[test]
    fn jsonl_duplicate_id_names_both_lines() {
        let raw = "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"b\",\"text\":\"y\"}\n{\"id\":\"a\",\"text\":\"z\"}\n";
        let err = parse_jsonl_corpus(raw, Source::Wiki, 300).unwrap_err();
        assert_eq!(err.to_string(), "duplicate id `a` on lines 1 and 3");
    }

    #[test]
    fn sample_identity_and_errors() {
        let docs: Vec<_> = (0..5).map(|i| doc(&format!("d{i}"))).collect();
        assert_eq!(sample_contexts(&docs, 5, 1).unwrap(), docs);
        let err = sample_contexts(&docs, 6, 1).unwrap_err();
        assert_eq!(err.to_string(), "cannot sample 6 documents from a corpus of 5");
    }

    #[test]
    fn sample_matches_reference_oracle() {
        // Selection computed by an independent Python implementation of the
        // documented SplitMix64 + partial Fisher–Yates scheme.
        let docs: Vec<_> = (0..5).map(|i| doc(&format!("d{i}"))).collect();
        let picked = sample_contexts(&docs, 2, 7).unwrap();
        let ids: Vec<_> = picked.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["d1", "d2"]);
    }

    #[test]
    fn sample_6000_of_6500() {
        let docs: Vec<_> = (0..6500).map(|i| doc(&format!("d{i}"))).collect();
        let a = sample_contexts(&docs, 6000, 1).unwrap();
        assert_eq!(a.len(), 6000);
        let first: Vec<_> = a.iter().take(5).map(|d| d.id.as_str()).collect();
        assert_eq!(first, ["d0", "d1", "d3", "d4", "d5"]);
        assert_eq!(a, sample_contexts(&docs, 6000, 1).unwrap());
    }

    proptest! {
        #[test]
        fn truncation_properties(text in "\\PC{0,40}", limit in 1usize..30) {
            let out = truncate_context(&text, limit);
            prop_assert!(out.chars().count() <= limit);
            prop_assert!(text.starts_with(out));
            if text.chars().count() <= limit {
                prop_assert_eq!(out, text.as_str());
            } else {
                prop_assert_eq!(out.chars().count(), limit);
            }
        }

        #[test]
        fn sample_is_an_ordered_subset(n in 0usize..60, frac in 0.0f64..=1.0, seed: u64) {
            let docs: Vec<_> = (0..n).map(|i| doc(&format!("d{i}"))).collect();
            let k = ((n as f64) * frac) as usize;
            let out = sample_contexts(&docs, k, seed).unwrap();
            prop_assert_eq!(out.len(), k);
            let positions: Vec<usize> = out
                .iter()
                .map(|d| docs.iter().position(|x| x.id == d.id).unwrap())
                .collect();
            prop_assert!(positions.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn squad_round_trip(articles in prop::collection::vec(
            prop::collection::vec(("[a-z]{1,6}", prop::collection::vec(("[A-Z][a-z]{0,5}", prop::collection::vec("[a-z]{1,4}", 1..3)), 0..3)), 1..3),
            1..3)) {
            let mut data = Vec::new();
            let mut expected = Vec::new();
            let mut qn = 0;
            for paragraphs in &articles {
                let mut ps = Vec::new();
                for (ctx, qas) in paragraphs {
                    let mut qv = Vec::new();
                    for (q, answers) in qas {
                        qn += 1;
                        expected.push((ctx.clone(), q.clone(), answers.clone()));
                        qv.push(serde_json::json!({
                            "id": format!("q{qn}"),
                            "question": q,
                            "answers": answers.iter().map(|a| serde_json::json!({"text": a})).collect::<Vec<_>>(),
                        }));
                    }
                    ps.push(serde_json::json!({"context": ctx, "qas": qv}));
                }
                data.push(serde_json::json!({"title": "t", "paragraphs": ps}));
            }
            let raw = serde_json::json!({"data": data}).to_string();
            let (docs, gold) = parse_squad_str(&raw, 300).unwrap();
            let by_id: HashMap<_, _> = docs.iter().map(|d| (d.id.as_str(), d.text.as_str())).collect();
            let got: Vec<_> = gold
                .iter()
                .map(|g| (by_id[g.context_id.as_str()].to_owned(), g.question.clone(), g.answers.clone()))
                .collect();
            prop_assert_eq!(got, expected);
            let mut texts: Vec<_> = docs.iter().map(|d| &d.text).collect();
            let before = texts.len();
            texts.sort();
            texts.dedup();
            prop_assert_eq!(texts.len(), before);
        }
    }
}
