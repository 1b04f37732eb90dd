//! LLM service abstraction.
//!
//! Two capabilities are needed by the pipeline: chat generation (question,
//! answer and evaluation completions) and echoed prompt log-probabilities
//! (IFD scoring). [`Backend`] exposes both; [`HttpBackend`] speaks the
//! OpenAI-compatible wire format and [`MockBackend`] is a deterministic
//! scripted stand-in.

mod http;
mod mock;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

pub use http::HttpBackend;
pub use mock::{whitespace_tokens, MockBackend, MockFailure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Generator,
    Scorer,
    Evaluatee,
}

/// Handle for a served model: where it lives, what it is called, and what it is used for.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelRef {
    pub backend_url: String,
    pub model_name: String,
    pub role: ModelRole,
}

impl ModelRef {
    pub fn new(backend_url: impl Into<String>, model_name: impl Into<String>, role: ModelRole) -> Self {
        Self {
            backend_url: backend_url.into(),
            model_name: model_name.into(),
            role,
        }
    }

    pub fn with_role(&self, role: ModelRole) -> Self {
        Self {
            role,
            ..self.clone()
        }
    }

    pub fn is_mock(&self) -> bool {
        self.backend_url.starts_with("mock")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    pub stop: Option<Vec<String>>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_tokens: 512,
            seed: None,
            stop: None,
        }
    }
}

impl GenerationParams {
    pub fn greedy() -> Self {
        Self {
            temperature: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be finite and non-negative, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::User,
            content: content.into(),
        }
    }
}

/// Natural-log probability of one token of a scored continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token_text: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredContinuation {
    pub context: String,
    pub continuation: String,
    pub token_scores: Vec<TokenScore>,
}

impl ScoredContinuation {
    pub fn logprobs(&self) -> Vec<f64> {
        self.token_scores.iter().map(|t| t.logprob).collect()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("HTTP {status} after {attempts} attempt(s): {body}")]
    Status { status: u16, attempts: u32, body: String },
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error("backend does not support prompt logprob echo: {0}")]
    LogprobsUnsupported(String),
    #[error("token alignment failure: {0}")]
    Alignment(String),
    #[error("malformed backend response: {0}")]
    Protocol(String),
}

impl BackendError {
    pub fn is_retryable_status(status: u16) -> bool {
        status == 429 || (500..600).contains(&status)
    }
}

/// The raw service operations. Callers go through [`Backend::generate`] and
/// [`Backend::score_continuation`], which enforce the request and response
/// contracts around these.
pub trait Backend: Send + Sync {
    fn chat(
        &self,
        model: &ModelRef,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<String, BackendError>;

    fn echo_logprobs(
        &self,
        scorer: &ModelRef,
        context: &str,
        continuation: &str,
    ) -> Result<Vec<TokenScore>, BackendError>;

    fn generate(
        &self,
        model: &ModelRef,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<String, BackendError> {
        if !matches!(model.role, ModelRole::Generator | ModelRole::Evaluatee) {
            return Err(BackendError::InvalidRequest(format!(
                "model {} has role {:?}; generation needs generator or evaluatee",
                model.model_name, model.role
            )));
        }
        if messages.is_empty() {
            return Err(BackendError::InvalidRequest("no messages".into()));
        }
        params.validate()?;
        let text = self.chat(model, messages, params)?;
        if text.trim().is_empty() {
            return Err(BackendError::EmptyCompletion);
        }
        Ok(text)
    }

    fn score_continuation(
        &self,
        scorer: &ModelRef,
        context: &str,
        continuation: &str,
    ) -> Result<ScoredContinuation, BackendError> {
        if scorer.role != ModelRole::Scorer {
            return Err(BackendError::InvalidRequest(format!(
                "model {} has role {:?}; scoring needs the scorer",
                scorer.model_name, scorer.role
            )));
        }
        if continuation.is_empty() {
            return Err(BackendError::InvalidRequest("continuation is empty".into()));
        }
        let token_scores = self.echo_logprobs(scorer, context, continuation)?;
        if token_scores.is_empty() {
            return Err(BackendError::Alignment(
                "no tokens returned for a non-empty continuation".into(),
            ));
        }
        if let Some(bad) = token_scores
            .iter()
            .find(|t| !t.logprob.is_finite() || t.logprob > 0.0)
        {
            return Err(BackendError::Protocol(format!(
                "logprob {} for token {:?} is not a finite value <= 0",
                bad.logprob, bad.token_text
            )));
        }
        Ok(ScoredContinuation {
            context: context.to_owned(),
            continuation: continuation.to_owned(),
            token_scores,
        })
    }
}

/// Client-side settings shared by every HTTP backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub timeout_seconds: u64,
    pub max_parallel: usize,
    pub max_attempts: u32,
    pub backoff_initial_ms: u64,
    /// Environment variable holding the bearer token. Keys never live in config files.
    pub api_key_env: String,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            timeout_seconds: 600,
            max_parallel: 4,
            max_attempts: 3,
            backoff_initial_ms: 1000,
            api_key_env: "EVOLVE_API_KEY".into(),
        }
    }
}

/// Maps a [`ModelRef`] to the backend serving it. `mock*` URLs go to the
/// shared mock, everything else to a cached HTTP client per base URL.
pub struct Backends {
    mock: Arc<dyn Backend>,
    config: BackendConfig,
    http: Mutex<HashMap<String, Arc<HttpBackend>>>,
}

impl Backends {
    pub fn new(config: BackendConfig) -> Self {
        Self::with_mock(config, Arc::new(MockBackend::default()))
    }

    pub fn with_mock(config: BackendConfig, mock: Arc<dyn Backend>) -> Self {
        Self {
            mock,
            config,
            http: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn resolve(&self, model: &ModelRef) -> Arc<dyn Backend> {
        if model.is_mock() {
            return Arc::clone(&self.mock);
        }
        let mut cache = self.http.lock().expect("backend cache poisoned");
        let client = cache
            .entry(model.backend_url.clone())
            .or_insert_with(|| Arc::new(HttpBackend::new(&model.backend_url, &self.config)));
        Arc::clone(client) as Arc<dyn Backend>
    }
}
