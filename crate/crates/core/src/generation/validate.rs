//! Heuristic output checks for generated questions and answers.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    pub max_question_chars: usize,
    pub min_answer_chars: usize,
    /// Case-insensitive phrases marking an answer that leans on the unseen document.
    pub dangling_patterns: Vec<String>,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            max_question_chars: 300,
            min_answer_chars: 10,
            dangling_patterns: [
                "the document above",
                "as mentioned in the fragment",
                "the above document",
                "the knowledge fragment",
                "the reference document",
            ]
            .map(String::from)
            .to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Rejection {
    Empty,
    MultipleQuestions,
    NotInterrogative,
    TooLong { chars: usize, max: usize },
    TooShort { chars: usize, min: usize },
    DanglingReference { pattern: String },
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rejection::Empty => write!(f, "empty"),
            Rejection::MultipleQuestions => write!(f, "multiple sub-questions"),
            Rejection::NotInterrogative => write!(f, "not interrogative"),
            Rejection::TooLong { chars, max } => write!(f, "too long ({chars} > {max} chars)"),
            Rejection::TooShort { chars, min } => write!(f, "too short ({chars} < {min} chars)"),
            Rejection::DanglingReference { pattern } => write!(f, "dangling reference {pattern:?}"),
        }
    }
}

pub type Verdict = Result<(), Rejection>;

fn is_question_mark(c: char) -> bool {
    c == '?' || c == '？'
}

pub fn validate_question(text: &str, cfg: &ValidationConfig) -> Verdict {
    let text = text.trim();
    if text.is_empty() {
        return Err(Rejection::Empty);
    }
    match text.chars().filter(|c| is_question_mark(*c)).count() {
        0 => return Err(Rejection::NotInterrogative),
        1 => {}
        _ => return Err(Rejection::MultipleQuestions),
    }
    let chars = text.chars().count();
    if chars > cfg.max_question_chars {
        return Err(Rejection::TooLong {
            chars,
            max: cfg.max_question_chars,
        });
    }
    Ok(())
}

pub fn validate_answer(text: &str, cfg: &ValidationConfig) -> Verdict {
    let text = text.trim();
    if text.is_empty() {
        return Err(Rejection::Empty);
    }
    let chars = text.chars().count();
    if chars < cfg.min_answer_chars {
        return Err(Rejection::TooShort {
            chars,
            min: cfg.min_answer_chars,
        });
    }
    let lower = text.to_lowercase();
    if let Some(pattern) = cfg
        .dangling_patterns
        .iter()
        .find(|p| !p.is_empty() && lower.contains(&p.to_lowercase()))
    {
        return Err(Rejection::DanglingReference {
            pattern: pattern.clone(),
        });
    }
    Ok(())
}
