//! BLEU, BERTScore and human-judged accuracy.

pub mod bertscore;
pub mod bleu;
pub mod embed;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bertscore::{bert_score, BertScoreTriple};
pub use bleu::{corpus_bleu, BleuScore, BleuTokenizer, Smoothing};
pub use embed::{EmbedError, EmbeddingProvider, FixtureEmbeddings, HashEmbedder, HttpEmbedder, TokenEmbedding};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{hypotheses} hypotheses but {references} references")]
    LengthMismatch { hypotheses: usize, references: usize },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Percentage of correct verdicts, kept as an exact count of tenths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: u64,
    pub total: u64,
    /// `1000 · correct / total` rounded half to even.
    pub tenths: u64,
}

impl Accuracy {
    pub fn percent(&self) -> f64 {
        self.tenths as f64 / 10.0
    }
}

impl fmt::Display for Accuracy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.tenths / 10, self.tenths % 10)
    }
}

/// `100 · correct / total` to one decimal place. Rounding is done in
/// integers, so the accuracies of complementary verdict sets sum to
/// exactly 100.
pub fn accuracy(verdicts: impl IntoIterator<Item = bool>) -> Result<Accuracy, MetricError> {
    let (mut correct, mut total) = (0u64, 0u64);
    for v in verdicts {
        total += 1;
        correct += u64::from(v);
    }
    accuracy_from_counts(correct, total)
}

pub fn accuracy_from_counts(correct: u64, total: u64) -> Result<Accuracy, MetricError> {
    if total == 0 {
        return Err(MetricError::Empty("judgments"));
    }
    assert!(correct <= total, "correct count exceeds total");
    let scaled = 1000 * correct;
    let (q, r) = (scaled / total, scaled % total);
    let tenths = match (2 * r).cmp(&total) {
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
        std::cmp::Ordering::Less => q,
    };
    Ok(Accuracy { correct, total, tenths })
}

/// Dataset-level BERTScore: the arithmetic mean of per-pair values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BertScoreSummary {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n: usize,
    /// Pairs whose hypothesis had no tokens; they score 0.
    pub empty_hypotheses: usize,
}

pub fn corpus_bert_score(
    hypotheses: &[impl AsRef<str>],
    references: &[impl AsRef<str>],
    provider: &dyn EmbeddingProvider,
) -> Result<BertScoreSummary, MetricError> {
    if hypotheses.len() != references.len() {
        return Err(MetricError::LengthMismatch { hypotheses: hypotheses.len(), references: references.len() });
    }
    if hypotheses.is_empty() {
        return Err(MetricError::Empty("corpus"));
    }
    let mut cache: HashMap<String, Vec<Vec<f64>>> = HashMap::new();
    let mut vectors = |text: &str| -> Result<Vec<Vec<f64>>, MetricError> {
        if let Some(v) = cache.get(text) {
            return Ok(v.clone());
        }
        let tokens = provider.embed(text)?;
        embed::check_embeddings(text, &tokens)?;
        let v: Vec<Vec<f64>> = tokens.into_iter().map(|t| t.vector).collect();
        cache.insert(text.to_owned(), v.clone());
        Ok(v)
    };
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    let mut empty = 0;
    for (h, rf) in hypotheses.iter().zip(references) {
        let hv = vectors(h.as_ref())?;
        let rv = vectors(rf.as_ref())?;
        if rv.is_empty() {
            return Err(MetricError::Empty("reference text"));
        }
        if hv.is_empty() {
            empty += 1;
            continue;
        }
        let s = bert_score(&hv, &rv)?;
        p += s.precision;
        r += s.recall;
        f += s.f1;
    }
    let n = hypotheses.len();
    Ok(BertScoreSummary { precision: p / n as f64, recall: r / n as f64, f1: f / n as f64, n, empty_hypotheses: empty })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reported_accuracies() {
        assert_eq!(accuracy_from_counts(227, 500).unwrap().to_string(), "45.4");
        assert_eq!(accuracy_from_counts(192, 500).unwrap().to_string(), "38.4");
        assert_eq!(accuracy_from_counts(452, 500).unwrap().to_string(), "90.4");
        assert_eq!(accuracy_from_counts(0, 10).unwrap().to_string(), "0.0");
        assert_eq!(accuracy_from_counts(227, 500).unwrap().percent(), 45.4);
    }

    #[test]
    fn half_even_rounding() {
        // 1/16 = 6.25% -> 62.5 tenths -> 62; 3/16 = 18.75% -> 187.5 -> 188
        assert_eq!(accuracy_from_counts(1, 16).unwrap().tenths, 62);
        assert_eq!(accuracy_from_counts(3, 16).unwrap().tenths, 188);
        assert_eq!(accuracy_from_counts(1, 3).unwrap().to_string(), "33.3");
    }

    #[test]
    fn empty_is_an_error() {
        assert!(accuracy(std::iter::empty()).is_err());
    }

    #[test]
    fn identical_corpus_bert_score_is_one() {
        let e = HashEmbedder::new(12);
        let s = corpus_bert_score(&["東京タワー", "電波塔"], &["東京タワー", "電波塔"], &e).unwrap();
        approx::assert_abs_diff_eq!(s.f1, 1.0, epsilon = 1e-12);
        let s = corpus_bert_score(&["", "電波塔"], &["東京タワー", "電波塔"], &e).unwrap();
        assert_eq!(s.empty_hypotheses, 1);
        approx::assert_abs_diff_eq!(s.f1, 0.5, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn complements_sum_to_100(verdicts in prop::collection::vec(any::<bool>(), 1..600)) {
            let a = accuracy(verdicts.iter().copied()).unwrap();
            let b = accuracy(verdicts.iter().map(|v| !v)).unwrap();
            prop_assert_eq!(a.tenths + b.tenths, 1000);
        }

        #[test]
        fn adding_a_correct_verdict_never_lowers_the_numerator(verdicts in prop::collection::vec(any::<bool>(), 1..100)) {
            let a = accuracy(verdicts.iter().copied()).unwrap();
            let mut more = verdicts.clone();
            more.push(true);
            let b = accuracy(more).unwrap();
            prop_assert_eq!(b.correct, a.correct + 1);
        }
    }
}
