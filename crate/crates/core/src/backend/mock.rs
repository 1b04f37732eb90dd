//! Deterministic scripted backend.
//!
//! Every response is a pure function of the request: scripted rules are
//! checked first, otherwise a reply is synthesized from a sha256 of the
//! request fields. The tokenizer is whitespace splitting (see
//! [`whitespace_tokens`]).

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::{Backend, BackendError, ChatMessage, GenerationParams, ModelRef, TokenScore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockFailure {
    Transport,
    Empty,
    Alignment,
    NoLogprobs,
}

impl MockFailure {
    fn into_error(self, what: &str) -> BackendError {
        match self {
            MockFailure::Transport => BackendError::Transport {
                attempts: 1,
                message: format!("scripted transport failure for {what}"),
            },
            MockFailure::Empty => BackendError::EmptyCompletion,
            MockFailure::Alignment => {
                BackendError::Alignment(format!("scripted alignment failure for {what}"))
            }
            MockFailure::NoLogprobs => BackendError::LogprobsUnsupported("mock scripted".into()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    replies: Vec<(String, String)>,
    generation_failures: Vec<(String, MockFailure)>,
    logprobs: HashMap<(String, String), Vec<f64>>,
    scoring_failures: Vec<(String, MockFailure)>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reply with `reply` whenever the rendered prompt contains `needle`.
    /// Earlier rules win.
    pub fn with_reply(mut self, needle: impl Into<String>, reply: impl Into<String>) -> Self {
        self.replies.push((needle.into(), reply.into()));
        self
    }

    pub fn fail_generation_containing(mut self, needle: impl Into<String>, failure: MockFailure) -> Self {
        self.generation_failures.push((needle.into(), failure));
        self
    }

    /// Script the per-token logprobs returned for an exact (context, continuation) pair.
    /// The list length must match the whitespace tokenization of the continuation.
    pub fn with_logprobs(
        mut self,
        context: impl Into<String>,
        continuation: impl Into<String>,
        logprobs: Vec<f64>,
    ) -> Self {
        self.logprobs
            .insert((context.into(), continuation.into()), logprobs);
        self
    }

    pub fn fail_scoring_containing(mut self, needle: impl Into<String>, failure: MockFailure) -> Self {
        self.scoring_failures.push((needle.into(), failure));
        self
    }

    fn synthesize_reply(model: &ModelRef, prompt: &str, params: &GenerationParams) -> String {
        let h = stable_hash(&[
            model.model_name.as_bytes(),
            prompt.as_bytes(),
            &params.seed.unwrap_or(0).to_le_bytes(),
        ]);
        if let Some(knowledge) = after_last(prompt, "Knowledge fragment:") {
            let snippet = leading_words(knowledge, 24, 400);
            let snippet = snippet.trim_end_matches(['.', ',', ':', ';']);
            const CLOSERS: [&str; 3] = [
                "Verify the result after each step.",
                "Record the outcome in the maintenance log.",
                "Escalate to the on-call engineer if the issue persists.",
            ];
            format!(
                "In operations practice: {snippet}. {}",
                CLOSERS[(h % 3) as usize]
            )
        } else if let Some(knowledge) = after_last(prompt, "Reference document:") {
            let topic: String = leading_words(knowledge, 6, 80)
                .chars()
                .filter(|c| *c != '?' && *c != '？')
                .collect();
            const FRAMES: [(&str, &str); 4] = [
                ("How should operators handle ", "?"),
                ("What is the first step when dealing with ", "?"),
                ("Why does this matter in daily operations: ", "?"),
                ("What usually causes ", "?"),
            ];
            let (head, tail) = FRAMES[(h % 4) as usize];
            format!("{head}{}{tail}", topic.trim_end_matches(['.', ',', ':', ';']))
        } else {
            const VOCAB: [&str; 12] = [
                "check", "the", "alarm", "component", "restart", "service", "verify",
                "configuration", "and", "replace", "log", "threshold",
            ];
            let words: Vec<&str> = (0..10)
                .map(|i| VOCAB[((h >> (i * 4)) % VOCAB.len() as u64) as usize])
                .collect();
            format!("{} {}.", leading_words(prompt, 8, 200), words.join(" "))
        }
    }

    fn synthesize_logprobs(scorer: &ModelRef, context: &str, tokens: &[&str]) -> Vec<f64> {
        let factor = if context.is_empty() {
            1.0
        } else {
            0.3 + unit(stable_hash(&[scorer.model_name.as_bytes(), context.as_bytes()]))
        };
        tokens
            .iter()
            .enumerate()
            .map(|(i, tok)| {
                let h = stable_hash(&[
                    scorer.model_name.as_bytes(),
                    tok.as_bytes(),
                    &(i as u64).to_le_bytes(),
                ]);
                -(0.05 + 5.95 * unit(h)) * factor
            })
            .collect()
    }
}

impl Backend for MockBackend {
    fn chat(
        &self,
        model: &ModelRef,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<String, BackendError> {
        let prompt = messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        if let Some((_, failure)) = self
            .generation_failures
            .iter()
            .find(|(needle, _)| prompt.contains(needle.as_str()))
        {
            return Err(failure.into_error("generation"));
        }
        if let Some((_, reply)) = self
            .replies
            .iter()
            .find(|(needle, _)| prompt.contains(needle.as_str()))
        {
            return Ok(reply.clone());
        }
        Ok(Self::synthesize_reply(model, &prompt, params))
    }

    fn echo_logprobs(
        &self,
        scorer: &ModelRef,
        context: &str,
        continuation: &str,
    ) -> Result<Vec<TokenScore>, BackendError> {
        if let Some((_, failure)) = self
            .scoring_failures
            .iter()
            .find(|(needle, _)| continuation.contains(needle.as_str()))
        {
            return Err(failure.into_error(continuation));
        }
        let tokens = whitespace_tokens(continuation);
        let logprobs = match self
            .logprobs
            .get(&(context.to_owned(), continuation.to_owned()))
        {
            Some(scripted) if scripted.len() == tokens.len() => scripted.clone(),
            Some(scripted) => {
                return Err(BackendError::Alignment(format!(
                    "scripted {} logprobs for {} tokens of {continuation:?}",
                    scripted.len(),
                    tokens.len()
                )))
            }
            None => Self::synthesize_logprobs(scorer, context, &tokens),
        };
        Ok(tokens
            .into_iter()
            .zip(logprobs)
            .map(|(tok, logprob)| TokenScore {
                token_text: tok.to_owned(),
                logprob,
            })
            .collect())
    }
}

/// Splits `text` into tokens that each start with their leading whitespace,
/// so the tokens concatenate back to `text` exactly.
pub fn whitespace_tokens(text: &str) -> Vec<&str> {
    let mut tokens = Vec::new();
    let mut start = 0;
    let mut ws_start = 0;
    let mut prev_ws = false;
    let mut seen_word = false;
    for (idx, ch) in text.char_indices() {
        let ws = ch.is_whitespace();
        if ws && !prev_ws {
            ws_start = idx;
        }
        if !ws && prev_ws && seen_word {
            tokens.push(&text[start..ws_start]);
            start = ws_start;
        }
        seen_word |= !ws;
        prev_ws = ws;
    }
    if start < text.len() {
        tokens.push(&text[start..]);
    }
    tokens
}

fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn after_last<'a>(haystack: &'a str, marker: &str) -> Option<&'a str> {
    haystack.rfind(marker).map(|i| &haystack[i + marker.len()..])
}

fn leading_words(text: &str, max_words: usize, max_chars: usize) -> String {
    let joined = text.split_whitespace().take(max_words).collect::<Vec<_>>().join(" ");
    joined.chars().take(max_chars).collect()
}
