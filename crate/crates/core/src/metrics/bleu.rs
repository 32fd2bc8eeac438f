//! Corpus BLEU with SacreBLEU's arithmetic.
//!
//! Statistics are accumulated over the corpus (clipped n-gram matches and
//! hypothesis n-gram totals for n = 1..4, plus summed lengths) and combined
//! as `sacrebleu.metrics.BLEU.compute_bleu` does: a zero precision
//! contributes a log of −9999999999, an order with no hypothesis n-grams
//! stops the loop, and a corpus with no matches at all scores 0 before
//! smoothing is considered. Logs are taken of fractional precisions and the
//! result scaled by 100 afterwards, so a perfect match is exactly 100; this
//! differs from SacreBLEU's percent-space arithmetic only in the last ulps.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::MetricError;

pub const MAX_ORDER: usize = 4;
const FLOOR_DEFAULT: f64 = 0.1;
const LOG_ZERO: f64 = -9_999_999_999.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleuTokenizer {
    /// Every non-whitespace Unicode scalar is a token.
    #[default]
    Char,
    /// Tokens are maximal runs of non-whitespace.
    Whitespace,
}

impl BleuTokenizer {
    pub fn as_str(self) -> &'static str {
        match self {
            BleuTokenizer::Char => "char",
            BleuTokenizer::Whitespace => "whitespace",
        }
    }

    pub fn tokenize(self, text: &str) -> Vec<String> {
        match self {
            BleuTokenizer::Char => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
            BleuTokenizer::Whitespace => text.split_whitespace().map(str::to_owned).collect(),
        }
    }
}

impl fmt::Display for BleuTokenizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BleuTokenizer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "char" => Ok(BleuTokenizer::Char),
            "whitespace" | "none" => Ok(BleuTokenizer::Whitespace),
            other => Err(format!("unknown BLEU tokenizer `{other}` (expected char or whitespace)")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Smoothing {
    /// A zero precision at any order makes the score 0.
    #[default]
    None,
    /// Zero-match orders get 1/(2^k · total), k counting such orders.
    Exp,
    /// Zero-match orders get `value`/total.
    Floor { value: f64 },
}

impl Smoothing {
    pub fn floor() -> Self {
        Smoothing::Floor { value: FLOOR_DEFAULT }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Smoothing::None => "none",
            Smoothing::Exp => "exp",
            Smoothing::Floor { .. } => "floor",
        }
    }
}

impl fmt::Display for Smoothing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Smoothing::Floor { value } => write!(f, "floor({value})"),
            other => f.write_str(other.as_str()),
        }
    }
}

impl FromStr for Smoothing {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Smoothing::None),
            "exp" => Ok(Smoothing::Exp),
            "floor" => Ok(Smoothing::floor()),
            other => Err(format!("unknown BLEU smoothing `{other}` (expected none, exp or floor)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// In [0, 100].
    pub score: f64,
    /// Smoothed precisions as fractions.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: u64,
    pub ref_len: u64,
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

pub fn corpus_bleu(
    hypotheses: &[impl AsRef<str>],
    references: &[impl AsRef<str>],
    tokenizer: BleuTokenizer,
    smoothing: Smoothing,
) -> Result<BleuScore, MetricError> {
    if hypotheses.len() != references.len() {
        return Err(MetricError::LengthMismatch { hypotheses: hypotheses.len(), references: references.len() });
    }
    if hypotheses.is_empty() {
        return Err(MetricError::Empty("corpus"));
    }
    let mut matches = [0u64; MAX_ORDER];
    let mut totals = [0u64; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0u64, 0u64);
    for (h, r) in hypotheses.iter().zip(references) {
        let ht = tokenizer.tokenize(h.as_ref());
        let rt = tokenizer.tokenize(r.as_ref());
        hyp_len += ht.len() as u64;
        ref_len += rt.len() as u64;
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&ht, n);
            let rc = ngram_counts(&rt, n);
            totals[n - 1] += ht.len().saturating_sub(n - 1) as u64;
            matches[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<u64>();
        }
    }
    Ok(from_statistics(matches, totals, hyp_len, ref_len, smoothing))
}

/// Combines sufficient statistics into a score.
pub fn from_statistics(
    matches: [u64; MAX_ORDER],
    totals: [u64; MAX_ORDER],
    hyp_len: u64,
    ref_len: u64,
    smoothing: Smoothing,
) -> BleuScore {
    let brevity_penalty = if hyp_len < ref_len {
        if hyp_len > 0 {
            (1.0 - ref_len as f64 / hyp_len as f64).exp()
        } else {
            0.0
        }
    } else {
        1.0
    };
    let mut out = BleuScore { score: 0.0, precisions: [0.0; MAX_ORDER], brevity_penalty, hyp_len, ref_len, matches, totals };
    if matches.iter().all(|&m| m == 0) {
        return out;
    }
    let mut exp_divisor = 1.0f64;
    for n in 0..MAX_ORDER {
        if totals[n] == 0 {
            break;
        }
        let total = totals[n] as f64;
        out.precisions[n] = if matches[n] > 0 {
            matches[n] as f64 / total
        } else {
            match smoothing {
                Smoothing::None => 0.0,
                Smoothing::Exp => {
                    exp_divisor *= 2.0;
                    1.0 / (exp_divisor * total)
                }
                Smoothing::Floor { value } => value / total,
            }
        };
    }
    let log_sum: f64 = out.precisions.iter().map(|&p| if p == 0.0 { LOG_ZERO } else { p.ln() }).sum();
    out.score = 100.0 * brevity_penalty * (log_sum / MAX_ORDER as f64).exp();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_scores_100() {
        let s = corpus_bleu(&["東京タワーは電波塔です"], &["東京タワーは電波塔です"], BleuTokenizer::Char, Smoothing::None).unwrap();
        assert_eq!(s.score, 100.0);
        assert_eq!(s.precisions, [1.0; 4]);
        assert_eq!(s.brevity_penalty, 1.0);
    }

    #[test]
    fn disjoint_scores_zero() {
        let s = corpus_bleu(&["abc"], &["xyz"], BleuTokenizer::Char, Smoothing::Exp).unwrap();
        assert_eq!(s.score, 0.0);
    }

    #[test]
    fn all_empty_hypotheses_score_zero() {
        let s = corpus_bleu(&["", " "], &["a b", "c"], BleuTokenizer::Whitespace, Smoothing::None).unwrap();
        assert_eq!(s.score, 0.0);
        assert_eq!(s.brevity_penalty, 0.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let err = corpus_bleu(&["a"], &["a", "b"], BleuTokenizer::Char, Smoothing::None).unwrap_err();
        assert!(matches!(err, MetricError::LengthMismatch { .. }));
        let none: [&str; 0] = [];
        assert!(corpus_bleu(&none, &none, BleuTokenizer::Char, Smoothing::None).is_err());
    }

    #[test]
    fn char_tokenizer_drops_whitespace() {
        assert_eq!(BleuTokenizer::Char.tokenize("東 京\tx"), ["東", "京", "x"]);
    }

    #[test]
    fn brevity_penalty_applies() {
        // hyp "a b c d", ref "a b c d e f": all precisions 1, BP = exp(1 - 6/4)
        let s = corpus_bleu(&["a b c d"], &["a b c d e f"], BleuTokenizer::Whitespace, Smoothing::None).unwrap();
        approx::assert_abs_diff_eq!(s.score, 100.0 * (-0.5f64).exp(), epsilon = 1e-12);
    }
}
