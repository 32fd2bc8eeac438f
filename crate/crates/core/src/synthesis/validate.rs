use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::ContextDocument;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationPolicy {
    /// Limits are in Unicode scalar values.
    pub max_question_chars: usize,
    pub max_answer_chars: usize,
    /// When set, answers whose character-bigram overlap with the context
    /// falls below this fraction are rejected.
    pub grounding_threshold: Option<f64>,
}

impl Default for ValidationPolicy {
    fn default() -> Self {
        Self { max_question_chars: 500, max_answer_chars: 1000, grounding_threshold: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    EmptyQuestion,
    EmptyAnswer,
    QuestionEqualsAnswer,
    QuestionTooLong,
    AnswerTooLong,
    Ungrounded,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::EmptyQuestion => "empty_question",
            RejectReason::EmptyAnswer => "empty_answer",
            RejectReason::QuestionEqualsAnswer => "question_equals_answer",
            RejectReason::QuestionTooLong => "question_too_long",
            RejectReason::AnswerTooLong => "answer_too_long",
            RejectReason::Ungrounded => "ungrounded",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

/// Checks one generated pair. Grounding is measured against the truncated
/// context the model actually saw.
pub fn validate_qa(question: &str, answer: &str, context: &ContextDocument, policy: &ValidationPolicy) -> Verdict {
    let (q, a) = (question.trim(), answer.trim());
    let reason = if q.is_empty() {
        Some(RejectReason::EmptyQuestion)
    } else if a.is_empty() {
        Some(RejectReason::EmptyAnswer)
    } else if q == a {
        Some(RejectReason::QuestionEqualsAnswer)
    } else if q.chars().count() > policy.max_question_chars {
        Some(RejectReason::QuestionTooLong)
    } else if a.chars().count() > policy.max_answer_chars {
        Some(RejectReason::AnswerTooLong)
    } else if policy.grounding_threshold.is_some_and(|t| bigram_overlap(a, &context.truncated) < t) {
        Some(RejectReason::Ungrounded)
    } else {
        None
    };
    reason.map_or(Verdict::Accept, Verdict::Reject)
}

/// Fraction of the answer's distinct character bigrams that also occur in
/// `context`. A one-character answer scores 1 if the character occurs in
/// the context and 0 otherwise.
pub fn bigram_overlap(answer: &str, context: &str) -> f64 {
    let chars: Vec<char> = answer.chars().collect();
    match chars.len() {
        0 => 0.0,
        1 => f64::from(u8::from(context.contains(chars[0]))),
        _ => {
            let ctx: Vec<char> = context.chars().collect();
            let ctx_bigrams: HashSet<(char, char)> = ctx.windows(2).map(|w| (w[0], w[1])).collect();
            let ans_bigrams: HashSet<(char, char)> = chars.windows(2).map(|w| (w[0], w[1])).collect();
            let hits = ans_bigrams.iter().filter(|b| ctx_bigrams.contains(b)).count();
            hits as f64 / ans_bigrams.len() as f64
        }
    }
}
