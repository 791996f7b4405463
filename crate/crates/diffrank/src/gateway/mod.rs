//! Clients for the external model roles: answering, embedding, rewrite
//! verification, pairwise judging and strategy annotation.

mod cache;
mod dispatch;
pub mod extract;
mod http;
mod mock;
mod prompts;
mod roles;

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::Cache;
pub use dispatch::dispatch;
pub use http::HttpBackend;
pub use mock::{synthetic_embedding, MockBackend, MockRole, MockWorld, WorldQuestion};
pub use prompts::{PromptError, Templates};
pub use roles::{
    annotate_rewrites, answer_question, embed, judge_pair, parse_judge_choice, parse_strategies, parse_verdict,
    verify_rewrite, AnswerOutcome, VerifierVerdict,
};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("environment variable `{0}` holding the API token is not set")]
    MissingCredential(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Parse(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("embedding dimension {got} differs from the bank's {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unparseable judgment for `{question_id}` in pass {pass}")]
    JudgeParse { question_id: String, pass: u8 },
    #[error("no scripted response for prompt digest {0}")]
    NoScript(String),
    #[error("cache: {0}")]
    Cache(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl GatewayError {
    /// Transport failures, rate limits and server errors are retried.
    pub fn is_retryable(&self) -> bool {
        match self {
            Self::Transport { .. } => true,
            Self::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, GatewayError>;

/// Connection settings for one backend role. The API token itself is never
/// stored here, only the name of the variable that holds it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub endpoint_url: String,
    pub model_id: String,
    pub auth_token_env_var: String,
    pub max_parallel: usize,
    pub timeout_seconds: u64,
    pub retry_limit: usize,
    pub cache_dir: Option<PathBuf>,
    pub backoff_base_ms: u64,
    pub temperature: f64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "https://api.openai.com/v1".into(),
            model_id: String::new(),
            auth_token_env_var: "OPENAI_API_KEY".into(),
            max_parallel: 8,
            timeout_seconds: 120,
            retry_limit: 3,
            cache_dir: None,
            backoff_base_ms: 500,
            temperature: 0.7,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GatewayError::Config(m));
        if self.max_parallel == 0 {
            return bad("max_parallel must be >= 1".into());
        }
        if self.model_id.is_empty() {
            return bad("model_id is empty".into());
        }
        let var = &self.auth_token_env_var;
        let valid_name = !var.is_empty()
            && !var.starts_with(|c: char| c.is_ascii_digit())
            && var.chars().all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_');
        if !valid_name {
            return bad(format!(
                "auth_token_env_var must name an environment variable (A-Z, 0-9, _), got {} characters",
                var.len()
            ));
        }
        Ok(())
    }

    pub fn with_model(&self, model_id: &str) -> Self {
        Self {
            model_id: model_id.into(),
            ..self.clone()
        }
    }
}

/// One chat-completion request. `sample_index` separates repeated samples
/// of the same prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub prompt: String,
    pub sample_index: u32,
}

pub trait Backend: Send + Sync {
    fn complete(&self, model_id: &str, request: &ChatRequest) -> Result<String>;
    fn embed(&self, model_id: &str, text: &str) -> Result<Vec<f64>>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, model_id: &str, request: &ChatRequest) -> Result<String> {
        (**self).complete(model_id, request)
    }

    fn embed(&self, model_id: &str, text: &str) -> Result<Vec<f64>> {
        (**self).embed(model_id, text)
    }
}

/// A backend bound to one model, with caching and retries.
pub struct Gateway {
    config: BackendConfig,
    backend: Box<dyn Backend>,
    cache: Option<Cache>,
    network_calls: Arc<AtomicUsize>,
}

impl Gateway {
    pub fn new(config: BackendConfig, backend: Box<dyn Backend>) -> Result<Self> {
        config.validate()?;
        let cache = config.cache_dir.as_ref().map(|d| Cache::new(d.clone()));
        Ok(Self {
            config,
            backend,
            cache,
            network_calls: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn model_id(&self) -> &str {
        &self.config.model_id
    }

    /// Requests that reached the backend (cache misses, retries included).
    /// Counts backend calls into `counter`, which may be shared between
    /// gateways.
    pub fn with_call_counter(mut self, counter: Arc<AtomicUsize>) -> Self {
        self.network_calls = counter;
        self
    }

    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    pub fn complete(&self, prompt: &str, sample_index: u32) -> Result<String> {
        let request = ChatRequest {
            prompt: prompt.into(),
            sample_index,
        };
        let key = Cache::chat_key(&self.config.model_id, &request);
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get_chat(&key)) {
            return Ok(hit);
        }
        let text = self.with_retry(|| self.backend.complete(&self.config.model_id, &request))?;
        if let Some(c) = &self.cache {
            c.put_chat(&key, &self.config.model_id, &request, &text)?;
        }
        Ok(text)
    }

    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        if text.is_empty() {
            return Err(GatewayError::EmptyInput("embedding text"));
        }
        let key = Cache::embed_key(&self.config.model_id, text);
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get_embedding(&key)) {
            return Ok(hit);
        }
        let v = self.with_retry(|| self.backend.embed(&self.config.model_id, text))?;
        if let Some(c) = &self.cache {
            c.put_embedding(&key, &self.config.model_id, text, &v)?;
        }
        Ok(v)
    }

    fn with_retry<T>(&self, mut call: impl FnMut() -> Result<T>) -> Result<T> {
        let mut attempt = 0;
        loop {
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            match call() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.config.retry_limit => {
                    let base = self.config.backoff_base_ms as f64 * 2f64.powi(attempt as i32);
                    let jitter = rand::rng().random_range(0.5..1.5);
                    std::thread::sleep(Duration::from_millis((base * jitter) as u64));
                    attempt += 1;
                }
                Err(GatewayError::Transport { message, .. }) => {
                    return Err(GatewayError::Transport {
                        attempts: attempt + 1,
                        message,
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}
