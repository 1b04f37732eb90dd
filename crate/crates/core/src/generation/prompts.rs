//! Versioned prompt templates and single-pass placeholder rendering.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::ChatMessage;
use crate::corpus::{KnowledgeDocument, DEFAULT_CHAR_BUDGET};
use crate::jsonl::sha256_hex;

use super::GenerationError;

pub const KNOWLEDGE: &str = "Knowledge";
pub const QUESTION: &str = "Question";

const BUILTIN_QUESTION: &str = include_str!("../../templates/question.v1.txt");
const BUILTIN_ANSWER: &str = include_str!("../../templates/answer.v1.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    /// `builtin:<file>` or the path it was loaded from.
    pub source: String,
    pub text: String,
    pub sha256: String,
}

impl PromptTemplate {
    pub fn from_text(source: impl Into<String>, text: &str) -> Self {
        let text = text.trim_end().to_owned();
        Self {
            source: source.into(),
            sha256: sha256_hex(text.as_bytes()),
            text,
        }
    }

    pub fn load(path: &Path) -> Result<Self, GenerationError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            GenerationError::Template(format!("cannot read {}: {e}", path.display()))
        })?;
        Ok(Self::from_text(path.display().to_string(), &text))
    }

    pub fn builtin_question() -> Self {
        Self::from_text("builtin:question.v1.txt", BUILTIN_QUESTION)
    }

    pub fn builtin_answer() -> Self {
        Self::from_text("builtin:answer.v1.txt", BUILTIN_ANSWER)
    }

    fn require(&self, placeholder: &str) -> Result<(), GenerationError> {
        if self.text.contains(&format!("{{{placeholder}}}")) {
            Ok(())
        } else {
            Err(GenerationError::Template(format!(
                "template {} lacks the {{{placeholder}}} placeholder",
                self.source
            )))
        }
    }

    pub fn render(&self, values: &[(&str, &str)]) -> String {
        render_placeholders(&self.text, values)
    }
}

/// Substitutes `{Name}` placeholders in one left-to-right pass. Inserted
/// values are never rescanned, and unknown `{...}` spans stay literal.
pub fn render_placeholders(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        let hit = tail.find('}').and_then(|close| {
            let name = &tail[1..close];
            values
                .iter()
                .find(|(key, _)| *key == name)
                .map(|(_, value)| (close, *value))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &tail[close + 1..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPrompt {
    pub messages: Vec<ChatMessage>,
    /// The document text was cut to the character budget.
    pub truncated: bool,
}

/// The question and answer templates of a run plus the document budget.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub question: PromptTemplate,
    pub answer: PromptTemplate,
    pub char_budget: usize,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            question: PromptTemplate::builtin_question(),
            answer: PromptTemplate::builtin_answer(),
            char_budget: DEFAULT_CHAR_BUDGET,
        }
    }
}

impl PromptSet {
    pub fn new(
        question: PromptTemplate,
        answer: PromptTemplate,
        char_budget: usize,
    ) -> Result<Self, GenerationError> {
        question.require(KNOWLEDGE)?;
        answer.require(QUESTION)?;
        answer.require(KNOWLEDGE)?;
        Ok(Self {
            question,
            answer,
            char_budget,
        })
    }

    pub fn build_question_prompt(
        &self,
        doc: &KnowledgeDocument,
    ) -> Result<RenderedPrompt, GenerationError> {
        self.question.require(KNOWLEDGE)?;
        let (text, truncated) = doc.text_within(self.char_budget);
        if truncated {
            tracing::warn!(doc = %doc.id, budget = self.char_budget, "document truncated");
        }
        Ok(RenderedPrompt {
            messages: vec![ChatMessage::user(
                self.question.render(&[(KNOWLEDGE, &text)]),
            )],
            truncated,
        })
    }

    pub fn build_answer_prompt(
        &self,
        doc: &KnowledgeDocument,
        question: &str,
    ) -> Result<RenderedPrompt, GenerationError> {
        if question.trim().is_empty() {
            return Err(GenerationError::InvalidInput("question is empty".into()));
        }
        self.answer.require(QUESTION)?;
        self.answer.require(KNOWLEDGE)?;
        let (text, truncated) = doc.text_within(self.char_budget);
        Ok(RenderedPrompt {
            messages: vec![ChatMessage::user(
                self.answer.render(&[(QUESTION, question), (KNOWLEDGE, &text)]),
            )],
            truncated,
        })
    }
}
