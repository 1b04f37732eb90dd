//! OpenAI-compatible HTTP client.
//!
//! `generate` posts to `/v1/chat/completions`. `score_continuation` posts the
//! concatenated prompt to `/v1/completions` with `echo`, `logprobs = 1` and
//! `max_tokens = 0`, then keeps the echoed tokens whose `text_offset` lies at
//! or after the end of the context.

use std::thread;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};
use tracing::warn;

use super::{Backend, BackendConfig, BackendError, ChatMessage, GenerationParams, ModelRef, TokenScore};

pub struct HttpBackend {
    base_url: String,
    agent: ureq::Agent,
    api_key: Option<String>,
    max_attempts: u32,
    backoff_initial: Duration,
}

impl HttpBackend {
    pub fn new(base_url: &str, config: &BackendConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_seconds)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: base_url.trim_end_matches('/').to_owned(),
            agent,
            api_key: std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty()),
            max_attempts: config.max_attempts.max(1),
            backoff_initial: Duration::from_millis(config.backoff_initial_ms),
        }
    }

    fn endpoint(&self, path: &str) -> String {
        if self.base_url.ends_with("/v1") {
            format!("{}{}", self.base_url, path)
        } else {
            format!("{}/v1{}", self.base_url, path)
        }
    }

    /// POSTs `body`, retrying transport errors and 429/5xx with doubling backoff.
    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let url = self.endpoint(path);
        let payload = body.to_string();
        let mut last_err = None;
        for attempt in 1..=self.max_attempts {
            if attempt > 1 {
                thread::sleep(self.backoff_initial * 2u32.pow(attempt - 2));
            }
            let mut req = self.agent.post(&url).header("content-type", "application/json");
            if let Some(key) = &self.api_key {
                req = req.header("authorization", &format!("Bearer {key}"));
            }
            match req.send(payload.as_str()) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    if (200..300).contains(&status) {
                        return serde_json::from_str(&text)
                            .map_err(|e| BackendError::Protocol(format!("{url}: {e}")));
                    }
                    let err = BackendError::Status {
                        status,
                        attempts: attempt,
                        body: text,
                    };
                    if !BackendError::is_retryable_status(status) {
                        return Err(err);
                    }
                    warn!(%url, status, attempt, "retryable HTTP status");
                    last_err = Some(err);
                }
                Err(e) => {
                    warn!(%url, attempt, error = %e, "transport error");
                    last_err = Some(BackendError::Transport {
                        attempts: attempt,
                        message: e.to_string(),
                    });
                }
            }
        }
        Err(last_err.expect("at least one attempt"))
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    #[serde(default)]
    logprobs: Option<EchoLogprobs>,
}

#[derive(Deserialize)]
struct EchoLogprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

impl Backend for HttpBackend {
    fn chat(
        &self,
        model: &ModelRef,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<String, BackendError> {
        let mut body = json!({
            "model": model.model_name,
            "messages": messages,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        if let Some(stop) = &params.stop {
            body["stop"] = json!(stop);
        }
        let resp: ChatResponse = serde_json::from_value(self.post("/chat/completions", &body)?)
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        Ok(resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default())
    }

    fn echo_logprobs(
        &self,
        scorer: &ModelRef,
        context: &str,
        continuation: &str,
    ) -> Result<Vec<TokenScore>, BackendError> {
        let body = json!({
            "model": scorer.model_name,
            "prompt": format!("{context}{continuation}"),
            "echo": true,
            "logprobs": 1,
            "max_tokens": 0,
            "temperature": 0.0,
        });
        let resp: CompletionResponse = serde_json::from_value(self.post("/completions", &body)?)
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        let logprobs = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or_else(|| BackendError::LogprobsUnsupported("response carries no logprobs".into()))?;
        align_continuation(context, logprobs)
    }
}

/// Keeps the echoed tokens belonging to the continuation.
///
/// Offsets are character offsets into the echoed prompt. A token straddling
/// the context boundary makes the split ambiguous and is an error. Leading
/// empty tokens without a logprob (a prepended BOS) are dropped.
fn align_continuation(context: &str, lp: EchoLogprobs) -> Result<Vec<TokenScore>, BackendError> {
    if lp.tokens.len() != lp.token_logprobs.len() || lp.tokens.len() != lp.text_offset.len() {
        return Err(BackendError::Protocol(
            "tokens, token_logprobs and text_offset lengths differ".into(),
        ));
    }
    let boundary = context.chars().count();
    let first = lp
        .text_offset
        .iter()
        .position(|&off| off >= boundary)
        .ok_or_else(|| BackendError::Alignment("no echoed token starts at or after the context".into()))?;
    if lp.text_offset[first] != boundary {
        return Err(BackendError::Alignment(format!(
            "token {:?} straddles the context boundary at char {boundary}",
            lp.tokens[first.saturating_sub(1)]
        )));
    }
    let mut out = Vec::new();
    for (token, logprob) in lp.tokens[first..].iter().zip(&lp.token_logprobs[first..]) {
        match logprob {
            Some(value) => out.push(TokenScore {
                token_text: token.clone(),
                logprob: *value,
            }),
            None if out.is_empty() && token.is_empty() => continue,
            None => {
                return Err(BackendError::Alignment(format!(
                    "continuation token {token:?} has no logprob"
                )))
            }
        }
    }
    Ok(out)
}
