//! File-based pipeline configuration.
//!
//! A single TOML file drives every subcommand. String values may reference
//! environment variables as `${NAME}` (`$${` escapes a literal `${`); an
//! unset variable is an error naming the key. Credentials are never config
//! keys: only the *name* of the variable holding them is.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DEFAULT_TRUNCATION;
use crate::gateway::http::{DEFAULT_API_KEY_ENV, DEFAULT_BASE_URL};
use crate::gateway::{GatewayConfig, GenerationParams, PriceTable, RetryPolicy};
use crate::metrics::{BleuTokenizer, Smoothing};
use crate::prompt::{FewShotExample, Language, PromptMode, TemplateSet};
use crate::synthesis::ValidationPolicy;
use crate::train::GridSpec;

/// File name of the resolved configuration written beside outputs.
pub const SNAPSHOT_FILE: &str = "resolved-config.toml";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("`{key}`: environment variable {var} is not set")]
    Unset { key: String, var: String },
    #[error("`{field}`: {message}")]
    Invalid { field: &'static str, message: String },
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub news: Option<PathBuf>,
    pub wiki: Option<PathBuf>,
    /// SQuAD-format training split.
    pub jsquad_train: Option<PathBuf>,
    /// SQuAD-format evaluation split (gold answers).
    pub jsquad_eval: Option<PathBuf>,
    /// Canonical contexts file (as written by `ingest`) read by later stages.
    pub contexts: Option<PathBuf>,
    /// Canonical gold QA file (as written by `ingest`).
    pub gold: Option<PathBuf>,
    pub sample_k: usize,
    pub seed: u64,
    pub truncate_chars: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            news: None,
            wiki: None,
            jsquad_train: None,
            jsquad_eval: None,
            contexts: None,
            gold: None,
            sample_k: 6000,
            seed: 2023,
            truncate_chars: DEFAULT_TRUNCATION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub language: Language,
    /// Template TOML overriding the built-in one for `language`.
    pub template: Option<PathBuf>,
    pub n: usize,
    pub mode: PromptMode,
    /// TOML or JSON file with `context_text` and `qa_pairs`; required for
    /// one-shot runs whose template carries no exemplar of the right arity.
    pub example: Option<PathBuf>,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self { language: Language::Ja, template: None, n: 1, mode: PromptMode::ZeroShot, example: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub backend: BackendKind,
    pub base_url: String,
    /// Name of the variable holding the API key.
    pub api_key_env: String,
    pub mock_script: Option<PathBuf>,
    pub rpm: Option<u32>,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    /// Contexts processed concurrently by the synthesis pipeline.
    pub concurrency: usize,
}

impl Default for GatewaySection {
    fn default() -> Self {
        let retry = RetryPolicy::default();
        Self {
            backend: BackendKind::Http,
            base_url: DEFAULT_BASE_URL.into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            mock_script: None,
            rpm: None,
            max_in_flight: 4,
            max_attempts: retry.max_attempts,
            base_delay_ms: retry.base_delay_ms,
            max_delay_ms: retry.max_delay_ms,
            concurrency: 4,
        }
    }
}

impl GatewaySection {
    pub fn gateway_config(&self) -> GatewayConfig {
        GatewayConfig {
            retry: RetryPolicy {
                max_attempts: self.max_attempts,
                base_delay_ms: self.base_delay_ms,
                max_delay_ms: self.max_delay_ms,
            },
            rpm: self.rpm,
            max_in_flight: self.max_in_flight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    #[default]
    Hash,
    Fixture,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub provider: EmbeddingKind,
    /// Vector size of the hash embedder.
    pub dim: usize,
    pub fixture: Option<PathBuf>,
    pub url: Option<String>,
    pub model: Option<String>,
    pub layer: Option<i32>,
    pub api_key_env: Option<String>,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self { provider: EmbeddingKind::Hash, dim: 64, fixture: None, url: None, model: None, layer: None, api_key_env: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub bleu_tokenizer: String,
    pub bleu_smoothing: String,
    /// Directory of `{label}.jsonl` prediction files for `matrix`.
    pub predictions_dir: Option<PathBuf>,
    pub embeddings: EmbeddingSection,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { bleu_tokenizer: "char".into(), bleu_smoothing: "none".into(), predictions_dir: None, embeddings: EmbeddingSection::default() }
    }
}

impl MetricsSection {
    pub fn tokenizer(&self) -> Result<BleuTokenizer, ConfigError> {
        self.bleu_tokenizer.parse().map_err(|e| invalid("metrics.bleu_tokenizer", e))
    }

    pub fn smoothing(&self) -> Result<Smoothing, ConfigError> {
        self.bleu_smoothing.parse().map_err(|e| invalid("metrics.bleu_smoothing", e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationSection {
    pub dir: PathBuf,
    pub bind: String,
    /// Name of the variable holding the shared judge token; unset disables auth.
    pub token_env: Option<String>,
    pub cors_origin: Option<String>,
    pub judges: Vec<String>,
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for AnnotationSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("annotations"),
            bind: "127.0.0.1:8080".into(),
            token_env: None,
            cors_origin: None,
            judges: vec!["judge-1".into(), "judge-2".into(), "judge-3".into(), "judge-4".into()],
            sample_size: 500,
            seed: 2023,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Run label; derived from N and prompt mode when unset.
    pub label: Option<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs"), label: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: CorpusSection,
    pub prompt: PromptSection,
    pub gateway: GatewaySection,
    pub generation: GenerationParams,
    pub validation: ValidationPolicy,
    pub metrics: MetricsSection,
    pub annotation: AnnotationSection,
    pub output: OutputSection,
    pub grid: GridSpec,
    pub prices: PriceTable,
}

impl PipelineConfig {
    /// Reads, interpolates and validates a config file. Relative paths are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let env: HashMap<String, String> = std::env::vars().collect();
        let mut cfg = Self::parse(&raw, &|name| env.get(name).cloned())
            .map_err(|e| match e {
                ConfigError::Parse { message, .. } => ConfigError::Parse { path: path.into(), message },
                other => other,
            })?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    /// Parses TOML text with `lookup` supplying environment variables. Does
    /// not validate.
    pub fn parse(raw: &str, lookup: &dyn Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let parse_err = |message: String| ConfigError::Parse { path: PathBuf::from("<config>"), message };
        let mut value: toml::Value = toml::from_str(raw).map_err(|e| parse_err(e.to_string()))?;
        interpolate(&mut value, "", lookup)?;
        value.try_into().map_err(|e: toml::de::Error| parse_err(e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !base.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.corpus.news,
            &mut self.corpus.wiki,
            &mut self.corpus.jsquad_train,
            &mut self.corpus.jsquad_eval,
            &mut self.corpus.contexts,
            &mut self.corpus.gold,
            &mut self.metrics.predictions_dir,
            &mut self.prompt.template,
            &mut self.prompt.example,
            &mut self.gateway.mock_script,
            &mut self.metrics.embeddings.fixture,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.annotation.dir);
        fix(&mut self.output.dir);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.corpus.sample_k == 0 {
            return Err(invalid("corpus.sample_k", "must be at least 1"));
        }
        if self.corpus.truncate_chars == 0 {
            return Err(invalid("corpus.truncate_chars", "must be at least 1"));
        }
        if self.prompt.n == 0 {
            return Err(invalid("prompt.n", "must be at least 1"));
        }
        if self.gateway.concurrency == 0 {
            return Err(invalid("gateway.concurrency", "must be at least 1"));
        }
        if self.gateway.max_in_flight == 0 {
            return Err(invalid("gateway.max_in_flight", "must be at least 1"));
        }
        if self.gateway.max_attempts == 0 {
            return Err(invalid("gateway.max_attempts", "must be at least 1"));
        }
        if self.gateway.rpm == Some(0) {
            return Err(invalid("gateway.rpm", "must be positive when set"));
        }
        if self.gateway.backend == BackendKind::Mock && self.gateway.mock_script.is_none() {
            return Err(invalid("gateway.mock_script", "required when gateway.backend = \"mock\""));
        }
        if self.gateway.backend == BackendKind::Http && self.gateway.base_url.trim().is_empty() {
            return Err(invalid("gateway.base_url", "must not be empty"));
        }
        self.generation.validate().map_err(|e| invalid("generation", e.to_string()))?;
        if let Some(t) = self.validation.grounding_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(invalid("validation.grounding_threshold", "must lie in [0, 1]"));
            }
        }
        self.metrics.tokenizer()?;
        self.metrics.smoothing()?;
        let e = &self.metrics.embeddings;
        match e.provider {
            EmbeddingKind::Hash if e.dim == 0 => return Err(invalid("metrics.embeddings.dim", "must be at least 1")),
            EmbeddingKind::Fixture if e.fixture.is_none() => {
                return Err(invalid("metrics.embeddings.fixture", "required for the fixture provider"))
            }
            EmbeddingKind::Http if e.url.is_none() => {
                return Err(invalid("metrics.embeddings.url", "required for the http provider"))
            }
            EmbeddingKind::Http if e.layer.is_none() => {
                return Err(invalid("metrics.embeddings.layer", "the http provider must record its layer"))
            }
            _ => {}
        }
        if self.annotation.judges.is_empty() {
            return Err(invalid("annotation.judges", "at least one judge is required"));
        }
        if self.annotation.sample_size == 0 {
            return Err(invalid("annotation.sample_size", "must be at least 1"));
        }
        crate::train::emit_hyperparam_grid(&self.grid).map_err(|e| invalid("grid", e.to_string()))?;
        for (name, price) in &self.prices {
            if !(price.input_per_1k >= 0.0 && price.output_per_1k >= 0.0) {
                return Err(ConfigError::Invalid { field: "prices", message: format!("{name}: prices must be non-negative") });
            }
        }
        Ok(())
    }

    /// Template set chosen by `prompt.language` / `prompt.template`.
    pub fn templates(&self) -> Result<TemplateSet, ConfigError> {
        match &self.prompt.template {
            Some(p) => TemplateSet::load(p).map_err(|e| invalid("prompt.template", e.to_string())),
            None => Ok(TemplateSet::builtin(self.prompt.language)),
        }
    }

    /// The configured one-shot exemplar, if any.
    pub fn example(&self) -> Result<Option<FewShotExample>, ConfigError> {
        let Some(path) = &self.prompt.example else { return Ok(None) };
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&raw).map_err(|e| e.to_string())
        } else {
            toml::from_str(&raw).map_err(|e| e.to_string())
        };
        parsed.map(Some).map_err(|m| invalid("prompt.example", format!("{}: {m}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    /// Writes [`SNAPSHOT_FILE`] into `dir`, creating it if needed. `command`
    /// is recorded as a leading comment.
    pub fn write_snapshot(&self, dir: &Path, command: &str) -> Result<PathBuf, ConfigError> {
        std::fs::create_dir_all(dir).map_err(|source| ConfigError::Io { path: dir.into(), source })?;
        let path = dir.join(SNAPSHOT_FILE);
        let body = format!("# {}\n{}", command.replace('\n', " "), self.to_toml());
        std::fs::write(&path, body).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
        Ok(path)
    }
}

fn interpolate(value: &mut toml::Value, key: &str, lookup: &dyn Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
    match value {
        toml::Value::String(s) => {
            if s.contains('$') {
                *s = expand(s, key, lookup)?;
            }
        }
        toml::Value::Array(items) => {
            for (i, v) in items.iter_mut().enumerate() {
                interpolate(v, &format!("{key}[{i}]"), lookup)?;
            }
        }
        toml::Value::Table(t) => {
            for (k, v) in t.iter_mut() {
                let path = if key.is_empty() { k.clone() } else { format!("{key}.{k}") };
                interpolate(v, &path, lookup)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn expand(s: &str, key: &str, lookup: &dyn Fn(&str) -> Option<String>) -> Result<String, ConfigError> {
    static PATTERN: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    let re = PATTERN.get_or_init(|| Regex::new(r"\$\$\{|\$\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap());
    let mut out = String::with_capacity(s.len());
    let mut last = 0;
    for caps in re.captures_iter(s) {
        let m = caps.get(0).unwrap();
        out.push_str(&s[last..m.start()]);
        match caps.get(1) {
            None => out.push_str("${"),
            Some(var) => {
                let v = lookup(var.as_str())
                    .ok_or_else(|| ConfigError::Unset { key: key.to_owned(), var: var.as_str().to_owned() })?;
                out.push_str(&v);
            }
        }
        last = m.end();
    }
    out.push_str(&s[last..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = PipelineConfig::parse("", &no_env).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        cfg.validate().unwrap();
        assert_eq!(cfg.corpus.truncate_chars, 300);
    }

    #[test]
    fn interpolates_environment_variables() {
        let raw = "[gateway]\nbase_url = \"${HOST}/v1\"\n[annotation]\nbind = \"$${literal}\"\n";
        let cfg = PipelineConfig::parse(raw, &|k| (k == "HOST").then(|| "http://x".to_string())).unwrap();
        assert_eq!(cfg.gateway.base_url, "http://x/v1");
        assert_eq!(cfg.annotation.bind, "${literal}");
    }

    #[test]
    fn unset_variable_names_key() {
        let err = PipelineConfig::parse("[gateway]\nbase_url = \"${NOPE}\"\n", &no_env).unwrap_err();
        match err {
            ConfigError::Unset { key, var } => {
                assert_eq!(key, "gateway.base_url");
                assert_eq!(var, "NOPE");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = PipelineConfig::parse("[gateway]\napi_key = \"sk-123\"\n", &no_env).unwrap_err();
        assert!(err.to_string().contains("api_key"), "{err}");
    }

    #[test]
    fn validation_names_field() {
        let cfg = PipelineConfig::parse("[gateway]\nbackend = \"mock\"\n", &no_env).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { field: "gateway.mock_script", .. }));
        let cfg = PipelineConfig::parse("[metrics]\nbleu_smoothing = \"add-k\"\n", &no_env).unwrap();
        assert!(matches!(cfg.validate().unwrap_err(), ConfigError::Invalid { field: "metrics.bleu_smoothing", .. }));
    }

    #[test]
    fn snapshot_round_trips() {
        let raw = "[prompt]\nn = 3\nmode = \"one_shot\"\n[generation]\ntemperature = 0.7\nseed = 9\n\
                   [prices.\"gpt-3.5-turbo-0613\"]\ninput_per_1k = 0.0015\noutput_per_1k = 0.002\n";
        let cfg = PipelineConfig::parse(raw, &no_env).unwrap();
        let again = PipelineConfig::parse(&cfg.to_toml(), &no_env).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.prompt.n, 3);
    }

    #[test]
    fn relative_paths_resolve_against_base() {
        let mut cfg = PipelineConfig::parse("[corpus]\nnews = \"data/news.jsonl\"\n", &no_env).unwrap();
        cfg.resolve_paths(Path::new("/etc/qa"));
        assert_eq!(cfg.corpus.news.unwrap(), Path::new("/etc/qa/data/news.jsonl"));
        assert_eq!(cfg.output.dir, Path::new("/etc/qa/runs"));
    }
}
