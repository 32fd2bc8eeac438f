//! Chat-completion gateway: retries, backoff, admission control and usage
//! accounting in front of a pluggable backend.

pub mod clock;
pub mod http;
pub mod limiter;
pub mod mock;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::PromptSpec;
use crate::sampling::SeededRng;
use clock::{Clock, SystemClock};
use limiter::{InFlight, RateLimiter};

pub use http::HttpBackend;
pub use mock::{MockBackend, MockEntry, MockFailure};

pub const DEFAULT_MODEL: &str = "gpt-3.5-turbo-0613";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(with = "secs")]
    pub timeout: Duration,
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            model_id: DEFAULT_MODEL.into(),
            temperature: 1.0,
            max_output_tokens: 1024,
            timeout: Duration::from_secs(60),
            seed: None,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(GatewayError::InvalidParams(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.max_output_tokens < 1 {
            return Err(GatewayError::InvalidParams("max_output_tokens must be >= 1".into()));
        }
        if self.model_id.trim().is_empty() {
            return Err(GatewayError::InvalidParams("model_id must not be empty".into()));
        }
        Ok(())
    }
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCompletion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency: Duration,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Status { status, .. } => *status == 429 || (500..600).contains(status),
            BackendError::Timeout | BackendError::Transport(_) => true,
            BackendError::Malformed(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("request rejected: {0}")]
    Request(BackendError),
    #[error("gave up after {attempts} attempts; last error: {last}")]
    Exhausted { attempts: u32, last: BackendError },
}

/// Anything that can turn a prompt into one completion attempt.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, prompt: &PromptSpec, params: &GenerationParams) -> Result<RawCompletion, BackendError>;

    /// Identifier recorded in run metadata.
    fn describe(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 5, base_delay_ms: 500, max_delay_ms: 30_000 }
    }
}

impl RetryPolicy {
    /// Backoff before retry number `attempt` (1-based count of failures so
    /// far): `min(max, base * 2^(attempt-1))`, scaled by a jitter factor in
    /// `[0.5, 1.0)`.
    pub fn delay(&self, attempt: u32, jitter: f64) -> Duration {
        let exp = self.base_delay_ms.saturating_mul(1u64 << (attempt.saturating_sub(1)).min(32));
        let capped = exp.min(self.max_delay_ms) as f64;
        Duration::from_secs_f64(capped * (0.5 + 0.5 * jitter) / 1000.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub retry: RetryPolicy,
    /// Request starts per sliding minute; `None` disables rate limiting.
    pub rpm: Option<u32>,
    pub max_in_flight: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self { retry: RetryPolicy::default(), rpm: None, max_in_flight: 4 }
    }
}

pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    config: GatewayConfig,
    clock: Arc<dyn Clock>,
    limiter: RateLimiter,
    in_flight: InFlight,
    jitter: Mutex<SeededRng>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway").field("backend", &self.backend.describe()).field("config", &self.config).finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, config: GatewayConfig) -> Self {
        Self::with_clock(backend, config, Arc::new(SystemClock::default()))
    }

    pub fn with_clock(backend: Arc<dyn ChatBackend>, config: GatewayConfig, clock: Arc<dyn Clock>) -> Self {
        Self {
            limiter: RateLimiter::new(config.rpm, clock.clone()),
            in_flight: InFlight::new(config.max_in_flight),
            backend,
            config,
            clock,
            jitter: Mutex::new(SeededRng::new(0x5EED)),
        }
    }

    pub fn backend_id(&self) -> String {
        self.backend.describe()
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Sends `prompt` until it succeeds, fails permanently, or the attempt
    /// budget runs out. Never mutates the prompt.
    pub fn chat_complete(&self, prompt: &PromptSpec, params: &GenerationParams) -> Result<CompletionResult, GatewayError> {
        params.validate()?;
        if prompt.messages.is_empty() {
            return Err(GatewayError::InvalidParams("prompt has no messages".into()));
        }
        let max_attempts = self.config.retry.max_attempts.max(1);
        let started = self.clock.now();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let outcome = {
                let _permit = self.in_flight.acquire();
                self.limiter.acquire();
                self.backend.complete(prompt, params)
            };
            match outcome {
                Ok(raw) => {
                    return Ok(CompletionResult {
                        text: raw.text,
                        prompt_tokens: raw.prompt_tokens,
                        completion_tokens: raw.completion_tokens,
                        latency: self.clock.now().saturating_sub(started),
                        attempt_count: attempt,
                    })
                }
                Err(e) if !e.is_retryable() => return Err(GatewayError::Request(e)),
                Err(e) if attempt >= max_attempts => return Err(GatewayError::Exhausted { attempts: attempt, last: e }),
                Err(e) => {
                    let jitter = self.jitter.lock().unwrap().unit_f64();
                    let delay = self.config.retry.delay(attempt, jitter);
                    tracing::debug!(attempt, ?delay, error = %e, "retrying chat completion");
                    self.clock.sleep(delay);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPrice {
    /// Currency units per 1,000 prompt tokens.
    pub input_per_1k: f64,
    /// Currency units per 1,000 completion tokens.
    pub output_per_1k: f64,
}

pub type PriceTable = BTreeMap<String, ModelPrice>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub model_id: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no price configured for model `{0}`")]
pub struct UnknownModel(pub String);

/// Sum over calls of `prompt/1000 * in + completion/1000 * out`.
pub fn estimate_cost<'a>(usage: impl IntoIterator<Item = &'a Usage>, prices: &PriceTable) -> Result<f64, UnknownModel> {
    let mut total = 0.0;
    for u in usage {
        let p = prices.get(&u.model_id).ok_or_else(|| UnknownModel(u.model_id.clone()))?;
        total += u.prompt_tokens as f64 / 1000.0 * p.input_per_1k + u.completion_tokens as f64 / 1000.0 * p.output_per_1k;
    }
    Ok(total)
}
