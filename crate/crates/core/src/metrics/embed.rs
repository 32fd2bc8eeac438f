//! Token-embedding sources for BERTScore.
//!
//! The HTTP provider speaks a minimal protocol:
//!
//! ```text
//! POST {url}            {"text": "..."}
//! 200                   {"tokens": ["..", ..], "vectors": [[f64, ..], ..]}
//! ```
//!
//! Vectors must be unit-normalized; every provider output is checked.

use std::collections::HashMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::sampling::SeededRng;

pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbedding {
    pub token: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("no embeddings for text {0:?}")]
    UnknownText(String),
    #[error("provider returned no tokens for non-empty text {0:?}")]
    NoTokens(String),
    #[error("token {index} has norm {norm}, expected 1 ± {NORM_TOLERANCE}")]
    NotUnit { index: usize, norm: f64 },
    #[error("token {index} has dimension {got}, expected {expected}")]
    Dimension { index: usize, expected: usize, got: usize },
    #[error("provider request failed: {0}")]
    Request(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<TokenEmbedding>, EmbedError>;

    /// Identifier recorded with every score, including model and layer.
    fn id(&self) -> String;
}

/// Checks the provider contract on one output.
pub fn check_embeddings(text: &str, tokens: &[TokenEmbedding]) -> Result<(), EmbedError> {
    if tokens.is_empty() && !text.trim().is_empty() {
        return Err(EmbedError::NoTokens(text.to_owned()));
    }
    let dim = tokens.first().map_or(0, |t| t.vector.len());
    for (index, t) in tokens.iter().enumerate() {
        if t.vector.len() != dim {
            return Err(EmbedError::Dimension { index, expected: dim, got: t.vector.len() });
        }
        let norm = t.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(EmbedError::NotUnit { index, norm });
        }
    }
    Ok(())
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Deterministic stand-in: one token per non-whitespace character, each
/// mapped to a pseudo-random unit vector derived from its SHA-256. Equal
/// characters get equal vectors, so identical strings score 1.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    fn vector(&self, token: &str) -> Vec<f64> {
        let digest = Sha256::digest(token.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = SeededRng::new(seed);
        normalize((0..self.dim).map(|_| rng.unit_f64() * 2.0 - 1.0).collect())
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<TokenEmbedding>, EmbedError> {
        Ok(text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| {
                let token = c.to_string();
                let vector = self.vector(&token);
                TokenEmbedding { token, vector }
            })
            .collect())
    }

    fn id(&self) -> String {
        format!("hash-char-d{}", self.dim)
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct FixtureLine {
    text: String,
    tokens: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

/// Embeddings precomputed offline, one JSONL line per text:
/// `{"text", "tokens", "vectors"}`.
#[derive(Debug, Clone)]
pub struct FixtureEmbeddings {
    by_text: HashMap<String, Vec<TokenEmbedding>>,
    id: String,
}

impl FixtureEmbeddings {
    pub fn load(path: &Path, label: &str) -> Result<Self, EmbedError> {
        let bytes = std::fs::read(path)?;
        let digest = hex::encode(Sha256::digest(&bytes));
        let raw = String::from_utf8(bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        let mut by_text = HashMap::new();
        for (i, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed: FixtureLine = serde_json::from_str(line).map_err(|e| {
                io::Error::new(io::ErrorKind::InvalidData, format!("{}: line {}: {e}", path.display(), i + 1))
            })?;
            if parsed.tokens.len() != parsed.vectors.len() {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("{}: line {}: {} tokens but {} vectors", path.display(), i + 1, parsed.tokens.len(), parsed.vectors.len()),
                )
                .into());
            }
            let tokens: Vec<TokenEmbedding> =
                parsed.tokens.into_iter().zip(parsed.vectors).map(|(token, vector)| TokenEmbedding { token, vector }).collect();
            check_embeddings(&parsed.text, &tokens)?;
            by_text.insert(parsed.text, tokens);
        }
        Ok(Self { by_text, id: format!("fixture:{label}:{}", &digest[..12]) })
    }
}

impl EmbeddingProvider for FixtureEmbeddings {
    fn embed(&self, text: &str) -> Result<Vec<TokenEmbedding>, EmbedError> {
        self.by_text.get(text).cloned().ok_or_else(|| EmbedError::UnknownText(text.to_owned()))
    }

    fn id(&self) -> String {
        self.id.clone()
    }
}

/// Remote embedding service; `model` and `layer` are declared by the
/// operator and recorded in the provider id.
#[derive(Debug)]
pub struct HttpEmbedder {
    url: String,
    model: String,
    layer: i32,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(url: &str, model: &str, layer: i32, api_key_env: Option<&str>) -> Result<Self, EmbedError> {
        let api_key = match api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| EmbedError::Request(format!("environment variable {var} is not set")))?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder().build().map_err(|e| EmbedError::Request(e.to_string()))?;
        Ok(Self { url: url.to_owned(), model: model.to_owned(), layer, api_key, client })
    }
}

#[derive(Deserialize)]
struct HttpReply {
    tokens: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingProvider for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<TokenEmbedding>, EmbedError> {
        let mut req = self.client.post(&self.url).json(&serde_json::json!({ "text": text }));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| EmbedError::Request(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(EmbedError::Request(format!("HTTP {status}")));
        }
        let reply: HttpReply = resp.json().map_err(|e| EmbedError::Request(e.to_string()))?;
        if reply.tokens.len() != reply.vectors.len() {
            return Err(EmbedError::Request(format!("{} tokens but {} vectors", reply.tokens.len(), reply.vectors.len())));
        }
        let tokens: Vec<TokenEmbedding> =
            reply.tokens.into_iter().zip(reply.vectors).map(|(token, vector)| TokenEmbedding { token, vector }).collect();
        check_embeddings(text, &tokens)?;
        Ok(tokens)
    }

    fn id(&self) -> String {
        format!("http:{}@layer{}", self.model, self.layer)
    }
}
