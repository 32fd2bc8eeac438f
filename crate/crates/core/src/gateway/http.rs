//! OpenAI-compatible `/chat/completions` backend.

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, GatewayError, GenerationParams, RawCompletion};
use crate::prompt::{Message, PromptSpec};

pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";
const BODY_EXCERPT: usize = 512;

#[derive(Debug, Serialize)]
struct ChatRequestBody<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct ChatResponseBody {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<UsageBody>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct UsageBody {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Debug)]
pub struct HttpBackend {
    endpoint: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    /// Reads the credential from `api_key_env`; fails before any network
    /// traffic when it is unset or empty.
    pub fn from_env(base_url: &str, api_key_env: &str) -> Result<Self, GatewayError> {
        let api_key = std::env::var(api_key_env)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| GatewayError::Config(format!("environment variable {api_key_env} is not set")))?;
        Self::new(base_url, api_key)
    }

    pub fn new(base_url: &str, api_key: String) -> Result<Self, GatewayError> {
        if base_url.trim().is_empty() {
            return Err(GatewayError::Config("base_url is empty".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| GatewayError::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(Self { endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')), api_key, client })
    }
}

fn excerpt(body: &str) -> String {
    match body.char_indices().nth(BODY_EXCERPT) {
        Some((i, _)) => format!("{}…", &body[..i]),
        None => body.to_owned(),
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, prompt: &PromptSpec, params: &GenerationParams) -> Result<RawCompletion, BackendError> {
        let body = ChatRequestBody {
            model: &params.model_id,
            messages: &prompt.messages,
            temperature: params.temperature,
            max_tokens: params.max_output_tokens,
            seed: params.seed,
        };
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .timeout(params.timeout)
            .json(&body)
            .send()
            .map_err(|e| if e.is_timeout() { BackendError::Timeout } else { BackendError::Transport(e.to_string()) })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        if !status.is_success() {
            return Err(BackendError::Status { status: status.as_u16(), body: excerpt(&text) });
        }
        let parsed: ChatResponseBody =
            serde_json::from_str(&text).map_err(|e| BackendError::Malformed(format!("{e}: {}", excerpt(&text))))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Malformed("response has no message content".into()))?;
        let usage = parsed.usage.unwrap_or(UsageBody { prompt_tokens: 0, completion_tokens: 0 });
        Ok(RawCompletion { text: content, prompt_tokens: usage.prompt_tokens, completion_tokens: usage.completion_tokens })
    }

    fn describe(&self) -> String {
        format!("http({})", self.endpoint)
    }
}
