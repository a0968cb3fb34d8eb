//! Pipeline and operator configuration.
//!
//! Configuration files are TOML. Any `${NAME}` occurrence is replaced by the
//! value of environment variable `NAME` before parsing, which is how API keys
//! get in without being written to disk. Relative paths resolve against the
//! directory holding the config file.
//!
//! ```toml
//! n = 0.5
//! order_mode = "descending"     # descending | ascending | random
//! seed = 7                      # required when order_mode = "random"
//! max_docs = 20
//! parallelism = 8
//! missing_logprob_floor = -100.0
//! yes_token_variants = ["Yes", " Yes", "yes", " yes"]
//! no_token_variants = ["No", " No", "no", " no"]
//! prompt_file = "prompts.toml"  # optional template override
//!
//! [generation]
//! predictor_max_tokens = 256
//! final_max_tokens = 256
//! judge_top_logprobs = 20
//! doc_char_budget = 2048
//!
//! [backend]
//! kind = "openai"               # or "mock" with `script = "script.json"`
//! endpoint = "http://localhost:8000/v1"
//! model = "mistral-7b-instruct"
//! api_key = "${OPENAI_API_KEY}"
//! timeout_secs = 60
//! max_attempts = 3
//! max_in_flight = 16
//! api_shape = "chat"            # or "completions"
//!
//! [service]
//! request_timeout_secs = 60
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::agents::PromptSet;
use crate::backend::{
    default_no_variants, default_yes_variants, ApiShape, HttpBackend, HttpBackendConfig, LlmBackend, MockBackend,
    MockScript,
};
use crate::filter::OrderKind;
use crate::types::{OrderMode, DEFAULT_MAX_DOCS};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("environment variable {0} referenced by the config is not set")]
    MissingEnv(String),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSettings {
    pub predictor_max_tokens: u32,
    pub final_max_tokens: u32,
    pub judge_top_logprobs: u32,
    /// Per-document character budget; longer documents lose their tail.
    pub doc_char_budget: usize,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self { predictor_max_tokens: 256, final_max_tokens: 256, judge_top_logprobs: 20, doc_char_budget: 2048 }
    }
}

/// Everything the per-query pipeline needs besides a backend.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub n: f64,
    pub order_mode: OrderMode,
    pub max_docs: usize,
    pub parallelism: usize,
    pub yes_token_variants: Vec<String>,
    pub no_token_variants: Vec<String>,
    pub missing_logprob_floor: f64,
    pub generation: GenerationSettings,
    pub prompts: PromptSet,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n: 0.0,
            order_mode: OrderMode::Descending,
            max_docs: DEFAULT_MAX_DOCS,
            parallelism: 4,
            yes_token_variants: default_yes_variants(),
            no_token_variants: default_no_variants(),
            missing_logprob_floor: -100.0,
            generation: GenerationSettings::default(),
            prompts: PromptSet::builtin(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(self.n.is_finite() && self.n >= 0.0) {
            return bad("n must be a finite value >= 0");
        }
        if self.parallelism < 1 {
            return bad("parallelism must be >= 1");
        }
        if self.max_docs < 1 {
            return bad("max_docs must be >= 1");
        }
        if self.yes_token_variants.is_empty() || self.no_token_variants.is_empty() {
            return bad("token variant lists must be non-empty");
        }
        if self.yes_token_variants.iter().any(|y| self.no_token_variants.contains(y)) {
            return bad("yes and no token variants must be disjoint");
        }
        if !self.missing_logprob_floor.is_finite() {
            return bad("missing_logprob_floor must be finite");
        }
        let g = &self.generation;
        if g.predictor_max_tokens < 1 || g.final_max_tokens < 1 {
            return bad("max output tokens must be >= 1");
        }
        if g.judge_top_logprobs < 1 {
            return bad("judge_top_logprobs must be >= 1");
        }
        if g.doc_char_budget < 1 {
            return bad("doc_char_budget must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendSettings {
    Mock { script: PathBuf },
    OpenAi(OpenAiSettings),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenAiSettings {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_attempts: u32,
    pub max_in_flight: usize,
    pub api_shape: ApiShape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceSettings {
    pub request_timeout: Duration,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        Self { request_timeout: Duration::from_secs(60) }
    }
}

/// A parsed config file.
#[derive(Debug, Clone, PartialEq)]
pub struct AppConfig {
    pub pipeline: PipelineConfig,
    pub backend: Option<BackendSettings>,
    pub service: ServiceSettings,
    /// Seed from the file, used by stochastic subcommands unless overridden.
    pub seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    n: Option<f64>,
    order_mode: Option<OrderKind>,
    seed: Option<u64>,
    max_docs: Option<usize>,
    parallelism: Option<usize>,
    missing_logprob_floor: Option<f64>,
    yes_token_variants: Option<Vec<String>>,
    no_token_variants: Option<Vec<String>>,
    prompt_file: Option<PathBuf>,
    #[serde(default)]
    generation: RawGeneration,
    backend: Option<RawBackend>,
    #[serde(default)]
    service: RawService,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGeneration {
    predictor_max_tokens: Option<u32>,
    final_max_tokens: Option<u32>,
    judge_top_logprobs: Option<u32>,
    doc_char_budget: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawBackend {
    Mock {
        script: PathBuf,
    },
    Openai {
        endpoint: String,
        model: String,
        api_key: Option<String>,
        timeout_secs: Option<u64>,
        max_attempts: Option<u32>,
        max_in_flight: Option<usize>,
        api_shape: Option<ApiShape>,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawService {
    request_timeout_secs: Option<u64>,
}

/// Replaces `${NAME}` with the environment value of `NAME`.
pub fn interpolate_env(raw: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| ConfigError::Parse("unterminated ${ in config".into()))?;
        let name = &after[..end];
        out.push_str(&lookup(name).ok_or_else(|| ConfigError::MissingEnv(name.to_string()))?);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&raw, base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let text = interpolate_env(text, |k| std::env::var(k).ok())?;
        let raw: RawConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base_dir.join(p) };

        let defaults = PipelineConfig::default();
        let order_mode = raw
            .order_mode
            .unwrap_or(OrderKind::Descending)
            .with_seed(raw.seed)
            .map_err(|e| ConfigError::Invalid(format!("order_mode: {e}")))?;
        let prompts = match raw.prompt_file {
            Some(p) => {
                let p = resolve(p);
                let text = std::fs::read_to_string(&p).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
                PromptSet::from_toml(&text).map_err(|e| ConfigError::Invalid(e.to_string()))?
            }
            None => defaults.prompts.clone(),
        };
        let g = GenerationSettings::default();
        let pipeline = PipelineConfig {
            n: raw.n.unwrap_or(defaults.n),
            order_mode,
            max_docs: raw.max_docs.unwrap_or(defaults.max_docs),
            parallelism: raw.parallelism.unwrap_or(defaults.parallelism),
            yes_token_variants: raw.yes_token_variants.unwrap_or(defaults.yes_token_variants),
            no_token_variants: raw.no_token_variants.unwrap_or(defaults.no_token_variants),
            missing_logprob_floor: raw.missing_logprob_floor.unwrap_or(defaults.missing_logprob_floor),
            generation: GenerationSettings {
                predictor_max_tokens: raw.generation.predictor_max_tokens.unwrap_or(g.predictor_max_tokens),
                final_max_tokens: raw.generation.final_max_tokens.unwrap_or(g.final_max_tokens),
                judge_top_logprobs: raw.generation.judge_top_logprobs.unwrap_or(g.judge_top_logprobs),
                doc_char_budget: raw.generation.doc_char_budget.unwrap_or(g.doc_char_budget),
            },
            prompts,
        };
        pipeline.validate()?;

        let backend = raw.backend.map(|b| match b {
            RawBackend::Mock { script } => BackendSettings::Mock { script: resolve(script) },
            RawBackend::Openai { endpoint, model, api_key, timeout_secs, max_attempts, max_in_flight, api_shape } => {
                let d = HttpBackendConfig::default();
                BackendSettings::OpenAi(OpenAiSettings {
                    endpoint,
                    model,
                    api_key: api_key.filter(|k| !k.is_empty()),
                    timeout: timeout_secs.map(Duration::from_secs).unwrap_or(d.timeout),
                    max_attempts: max_attempts.unwrap_or(d.max_attempts),
                    max_in_flight: max_in_flight.unwrap_or(d.max_in_flight),
                    api_shape: api_shape.unwrap_or_default(),
                })
            }
        });
        let service = ServiceSettings {
            request_timeout: raw
                .service
                .request_timeout_secs
                .map(Duration::from_secs)
                .unwrap_or(ServiceSettings::default().request_timeout),
        };
        Ok(Self { pipeline, backend, service, seed: raw.seed })
    }
}

/// Instantiates the configured backend.
pub fn build_backend(settings: &BackendSettings) -> Result<Arc<dyn LlmBackend>, ConfigError> {
    match settings {
        BackendSettings::Mock { script } => {
            let script = MockScript::load(script).map_err(ConfigError::Invalid)?;
            Ok(Arc::new(MockBackend::new(script).map_err(ConfigError::Invalid)?))
        }
        BackendSettings::OpenAi(s) => {
            let backend = HttpBackend::new(HttpBackendConfig {
                endpoint: s.endpoint.clone(),
                model: s.model.clone(),
                api_key: s.api_key.clone(),
                timeout: s.timeout,
                max_attempts: s.max_attempts,
                max_in_flight: s.max_in_flight,
                api_shape: s.api_shape,
                ..HttpBackendConfig::default()
            })
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            Ok(Arc::new(backend))
        }
    }
}
