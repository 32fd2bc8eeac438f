//! Greedy-matching BERTScore over precomputed token embeddings.
//!
//! With `S[i][j] = ref_i · hyp_j`, recall is the mean over reference tokens
//! of their best hypothesis match and precision the mean over hypothesis
//! tokens of their best reference match. There is no idf weighting and no
//! baseline rescaling.

use serde::{Deserialize, Serialize};

use super::MetricError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BertScoreTriple {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl BertScoreTriple {
    pub fn new(precision: f64, recall: f64) -> Self {
        let sum = precision + recall;
        let f1 = if sum > 0.0 { 2.0 * precision * recall / sum } else { 0.0 };
        Self { precision, recall, f1 }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check(side: &'static str, vectors: &[Vec<f64>], dim: usize) -> Result<(), MetricError> {
    if vectors.is_empty() {
        return Err(MetricError::Empty(side));
    }
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(MetricError::DimensionMismatch { expected: dim, got: v.len() });
    }
    Ok(())
}

pub fn bert_score(hyp: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<BertScoreTriple, MetricError> {
    let dim = reference.first().map(Vec::len).ok_or(MetricError::Empty("reference embeddings"))?;
    if dim == 0 {
        return Err(MetricError::Empty("embedding dimension"));
    }
    check("reference embeddings", reference, dim)?;
    check("hypothesis embeddings", hyp, dim)?;
    let sim: Vec<Vec<f64>> = reference.iter().map(|r| hyp.iter().map(|h| dot(r, h)).collect()).collect();
    let recall = sim.iter().map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max)).sum::<f64>() / reference.len() as f64;
    let precision = (0..hyp.len())
        .map(|j| sim.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / hyp.len() as f64;
    Ok(BertScoreTriple::new(precision, recall))
}
