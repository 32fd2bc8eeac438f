//! Synthesis and answer prompt rendering.
//!
//! Templates are versioned TOML files with named placeholders. The
//! synthesis body uses `{INSTRUCTION}`, `{EXAMPLE}` and `{QA context}`; the
//! answer prompt uses `{QUESTION}` and `{CONTEXT}`. Substitution is a single
//! left-to-right pass, so placeholder-looking text inside substituted values
//! is never expanded again.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ContextDocument;

const EN_V1: &str = include_str!("../templates/en-v1.toml");
const JA_V1: &str = include_str!("../templates/ja-v1.toml");

pub const PH_CONTEXT_INPUT: &str = "{QA context}";
pub const PH_QUESTION: &str = "{QUESTION}";
pub const PH_CONTEXT: &str = "{CONTEXT}";
const PH_INSTRUCTION: &str = "{INSTRUCTION}";
const PH_EXAMPLE: &str = "{EXAMPLE}";
const PH_N: &str = "{N}";

pub const RESPONSE_HEADER: &str = "## Response";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    ZeroShot,
    OneShot,
}

impl PromptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::ZeroShot => "zero_shot",
            PromptMode::OneShot => "one_shot",
        }
    }

    /// Short label used in report tables.
    pub fn short(self) -> &'static str {
        match self {
            PromptMode::ZeroShot => "zero",
            PromptMode::OneShot => "one",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "zero_shot" | "zero" => Ok(PromptMode::ZeroShot),
            "one_shot" | "one" => Ok(PromptMode::OneShot),
            other => Err(format!("unknown prompt mode `{other}` (expected zero_shot or one_shot)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Ja,
}

impl FromStr for Language {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "en" => Ok(Language::En),
            "ja" => Ok(Language::Ja),
            other => Err(format!("unknown template language `{other}` (expected en or ja)")),
        }
    }
}

/// A complete prompt ready to send to a chat endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub messages: Vec<Message>,
    pub mode: PromptMode,
    pub n_pairs: usize,
    pub template_version: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl PromptSpec {
    /// Message contents joined by a blank line; this is the text the mock
    /// backend hashes.
    pub fn rendered_text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n\n")
    }

    /// N=1 and N=3 are the only pair counts the original experiments used.
    pub fn is_paper_faithful(&self) -> bool {
        matches!(self.n_pairs, 1 | 3)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub context_text: String,
    pub qa_pairs: Vec<(String, String)>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("one-shot exemplar has {got} QA pairs but the prompt asks for {expected}")]
    Arity { expected: usize, got: usize },
    #[error("one-shot prompt requires an exemplar")]
    MissingExample,
    #[error("zero-shot prompt must not carry an exemplar")]
    UnexpectedExample,
    #[error("pair count must be at least 1")]
    ZeroPairs,
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("template {version}: {message}")]
    Template { version: String, message: String },
}

/// The strings that make up one template version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub version: String,
    pub language: Language,
    pub synthesis: String,
    pub instruction_single: String,
    pub instruction_multi: String,
    pub schema_texts: String,
    pub schema_question: String,
    pub schema_answer: String,
    pub answer: String,
    #[serde(default)]
    pub example: Option<FewShotExample>,
}

impl TemplateSet {
    pub fn builtin(language: Language) -> Self {
        let raw = match language {
            Language::En => EN_V1,
            Language::Ja => JA_V1,
        };
        Self::parse(raw).expect("built-in templates are valid")
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let raw = std::fs::read_to_string(path).map_err(|e| PromptError::Template {
            version: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&raw)
    }

    pub fn parse(raw: &str) -> Result<Self, PromptError> {
        let set: TemplateSet = toml::from_str(raw).map_err(|e| PromptError::Template {
            version: "<unparsed>".into(),
            message: e.to_string(),
        })?;
        set.check()?;
        Ok(set)
    }

    fn check(&self) -> Result<(), PromptError> {
        let need = |body: &str, name: &str, ph: &str| {
            if body.contains(ph) {
                Ok(())
            } else {
                Err(PromptError::Template {
                    version: self.version.clone(),
                    message: format!("{name} is missing placeholder {ph}"),
                })
            }
        };
        need(&self.synthesis, "synthesis", PH_INSTRUCTION)?;
        need(&self.synthesis, "synthesis", PH_EXAMPLE)?;
        need(&self.synthesis, "synthesis", PH_CONTEXT_INPUT)?;
        need(&self.instruction_multi, "instruction_multi", PH_N)?;
        need(&self.answer, "answer", PH_QUESTION)?;
        need(&self.answer, "answer", PH_CONTEXT)?;
        if !self.answer.trim_end().ends_with(RESPONSE_HEADER) {
            return Err(PromptError::Template {
                version: self.version.clone(),
                message: format!("answer template must end with `{RESPONSE_HEADER}`"),
            });
        }
        Ok(())
    }

    fn schema_pair(&self) -> (String, String) {
        (self.schema_question.clone(), self.schema_answer.clone())
    }
}

/// Single-pass substitution of named placeholders.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    loop {
        let next = values
            .iter()
            .filter_map(|(name, value)| rest.find(name).map(|pos| (pos, *name, *value)))
            .min_by_key(|(pos, name, _)| (*pos, std::cmp::Reverse(name.len())));
        match next {
            Some((pos, name, value)) => {
                out.push_str(&rest[..pos]);
                out.push_str(value);
                rest = &rest[pos + name.len()..];
            }
            None => {
                out.push_str(rest);
                return out;
            }
        }
    }
}

fn json_pair(question: &str, answer: &str) -> String {
    // serde_json never fails on plain strings
    format!(
        "{{\"Question\":{}, \"Answer\":{}}}",
        serde_json::to_string(question).unwrap(),
        serde_json::to_string(answer).unwrap()
    )
}

/// The JSON shown after `output:` in the example block: one object for a
/// single pair, an array of objects otherwise.
pub fn render_output_json(pairs: &[(String, String)]) -> String {
    let objects: Vec<String> = pairs.iter().map(|(q, a)| json_pair(q, a)).collect();
    if objects.len() == 1 {
        objects.into_iter().next().unwrap()
    } else {
        format!("[{}]", objects.join(", "))
    }
}

fn example_block(context_text: &str, pairs: &[(String, String)]) -> String {
    format!("texts:\"{context_text}\"\noutput:{}", render_output_json(pairs))
}

/// Renders the QA-synthesis prompt for one context.
///
/// The input context is the document's `truncated` text, inserted unquoted.
pub fn build_synthesis_prompt(
    templates: &TemplateSet,
    context: &ContextDocument,
    n: usize,
    mode: PromptMode,
    example: Option<&FewShotExample>,
) -> Result<PromptSpec, PromptError> {
    if n == 0 {
        return Err(PromptError::ZeroPairs);
    }
    let example_text = match (mode, example) {
        (PromptMode::ZeroShot, Some(_)) => return Err(PromptError::UnexpectedExample),
        (PromptMode::OneShot, None) => return Err(PromptError::MissingExample),
        (PromptMode::ZeroShot, None) => {
            let pairs = vec![templates.schema_pair(); n];
            example_block(&templates.schema_texts, &pairs)
        }
        (PromptMode::OneShot, Some(ex)) => {
            if ex.qa_pairs.len() != n {
                return Err(PromptError::Arity { expected: n, got: ex.qa_pairs.len() });
            }
            if ex.context_text.trim().is_empty() {
                return Err(PromptError::Empty("exemplar context"));
            }
            if ex.qa_pairs.iter().any(|(q, a)| q.trim().is_empty() || a.trim().is_empty()) {
                return Err(PromptError::Empty("exemplar question/answer"));
            }
            example_block(&ex.context_text, &ex.qa_pairs)
        }
    };
    let n_text = n.to_string();
    let instruction = if n == 1 {
        templates.instruction_single.clone()
    } else {
        fill(&templates.instruction_multi, &[(PH_N, &n_text)])
    };
    let content = fill(
        &templates.synthesis,
        &[
            (PH_INSTRUCTION, &instruction),
            (PH_EXAMPLE, &example_text),
            (PH_CONTEXT_INPUT, &context.truncated),
        ],
    );
    let mut warnings = Vec::new();
    if !matches!(n, 1 | 3) {
        warnings.push(format!("n={n} was not used in the original experiments"));
    }
    Ok(PromptSpec {
        messages: vec![Message { role: Role::User, content }],
        mode,
        n_pairs: n,
        template_version: templates.version.clone(),
        warnings,
    })
}

const SECTION_HEADERS: [&str; 3] = ["## Instruction", "## Context", "## Response"];

/// Renders the answer-generation prompt used for fine-tuning and inference.
pub fn build_answer_prompt(templates: &TemplateSet, question: &str, context_text: &str) -> Result<PromptSpec, PromptError> {
    if question.trim().is_empty() {
        return Err(PromptError::Empty("question"));
    }
    if context_text.trim().is_empty() {
        return Err(PromptError::Empty("context"));
    }
    let mut warnings = Vec::new();
    for (name, value) in [("question", question), ("context", context_text)] {
        if value.lines().any(|l| SECTION_HEADERS.contains(&l.trim_end())) {
            warnings.push(format!("{name} contains a section header line; substituted verbatim"));
        }
    }
    let content = fill(&templates.answer, &[(PH_QUESTION, question), (PH_CONTEXT, context_text)]);
    Ok(PromptSpec {
        messages: vec![Message { role: Role::User, content }],
        mode: PromptMode::ZeroShot,
        n_pairs: 1,
        template_version: templates.version.clone(),
        warnings,
    })
}

/// Inverse of [`build_answer_prompt`] for the built-in answer layout.
///
/// Splits at the first `\n\n## Context\n` and the last `\n\n## Response`, so
/// it is exact whenever the question itself has no blank-line-prefixed
/// `## Context` line.
pub fn parse_answer_prompt(prompt: &str) -> Option<(String, String)> {
    let body = prompt.strip_prefix("## Instruction\n")?;
    let body = body.strip_suffix("\n\n## Response")?;
    let (question, context) = body.split_once("\n\n## Context\n")?;
    Some((question.to_owned(), context.to_owned()))
}

/// The JSON text after `output:` in the `## example` block of a rendered
/// synthesis prompt. Placeholders in the schema are plain JSON strings, so
/// stripping the `output:` prefix is the only step needed before parsing.
pub fn example_output_json(rendered: &str) -> Option<&str> {
    let start = rendered.find("## example\n")?;
    let block = &rendered[start..];
    let end = block.find("\n\n## input").unwrap_or(block.len());
    block[..end].lines().find_map(|l| l.strip_prefix("output:"))
}
