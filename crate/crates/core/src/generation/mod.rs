//! QA generation: render prompts, call the generator, validate, and assemble
//! the iteration dataset (one pair per document).

mod prompts;
mod validate;

use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::backend::{Backend, BackendError, GenerationParams, ModelRef};
use crate::corpus::KnowledgeDocument;
use crate::jsonl::{self, JsonlError};
use crate::parallel::bounded_map;
use crate::seed::derive_seed;

pub use prompts::{render_placeholders, PromptSet, PromptTemplate, RenderedPrompt, KNOWLEDGE, QUESTION};
pub use validate::{validate_answer, validate_question, Rejection, ValidationConfig, Verdict};

#[derive(Debug, thiserror::Error)]
pub enum GenerationError {
    #[error("template error: {0}")]
    Template(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(
        "{rejected} of {total} documents produced no valid QA pair (limit {limit}); first: {}",
        .failures.first().map(|f| format!("{} ({})", f.doc_id, f.reason)).unwrap_or_default()
    )]
    TooManyRejected {
        rejected: usize,
        total: usize,
        limit: f64,
        failures: Vec<DocFailure>,
    },
    #[error(transparent)]
    Io(#[from] JsonlError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub id: String,
    pub iteration: u32,
    pub doc_id: String,
    pub question: String,
    pub answer: String,
}

impl QAPair {
    pub fn make_id(iteration: u32, doc_id: &str) -> String {
        format!("it{iteration}-{doc_id}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocFailure {
    pub doc_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generated: usize,
    pub rejected: usize,
    /// Extra attempts spent on regeneration, summed over documents.
    pub regenerated: usize,
    pub truncated: usize,
    pub failures: Vec<DocFailure>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationDataset {
    pub iteration: u32,
    pub pairs: Vec<QAPair>,
    pub stats: GenerationStats,
}

impl IterationDataset {
    pub fn write_jsonl(&self, path: &Path) -> Result<String, JsonlError> {
        jsonl::write(path, &self.pairs)
    }

    pub fn read_pairs(path: &Path) -> Result<Vec<QAPair>, JsonlError> {
        Ok(jsonl::read(path)?.into_iter().map(|r| r.value).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSettings {
    pub params: GenerationParams,
    /// Extra attempts after a failed validation or backend error.
    pub regenerate_attempts: u32,
    pub max_failure_fraction: f64,
    pub validation: ValidationConfig,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            params: GenerationParams::default(),
            regenerate_attempts: 2,
            max_failure_fraction: 0.2,
            validation: ValidationConfig::default(),
        }
    }
}

enum DocOutcome {
    Pair {
        pair: QAPair,
        extra_attempts: usize,
        truncated: bool,
    },
    Failed {
        reason: String,
        truncated: bool,
    },
}

pub struct QaGenerator<'a> {
    pub backend: &'a dyn Backend,
    pub prompts: &'a PromptSet,
    pub settings: &'a GenerationSettings,
    pub max_parallel: usize,
    pub run_seed: u64,
}

impl QaGenerator<'_> {
    fn attempt_params(&self, iteration: u32, doc_id: &str, attempt: u32, stage: &str) -> GenerationParams {
        let base = self.settings.params.seed.unwrap_or(self.run_seed);
        GenerationParams {
            seed: Some(derive_seed(
                base,
                &[&iteration.to_string(), doc_id, &attempt.to_string(), stage],
            )),
            ..self.settings.params.clone()
        }
    }

    fn generate_one(
        &self,
        doc: &KnowledgeDocument,
        model: &ModelRef,
        iteration: u32,
    ) -> Result<DocOutcome, GenerationError> {
        let q_prompt = self.prompts.build_question_prompt(doc)?;
        let truncated = q_prompt.truncated;
        let mut last_reason = String::new();
        for attempt in 0..=self.settings.regenerate_attempts {
            let params = self.attempt_params(iteration, &doc.id, attempt, "question");
            let question = match self.backend.generate(model, &q_prompt.messages, &params) {
                Ok(q) => q.trim().to_owned(),
                Err(e) => {
                    last_reason = backend_reason(&e);
                    continue;
                }
            };
            if let Err(r) = validate_question(&question, &self.settings.validation) {
                debug!(doc = %doc.id, attempt, %r, "question rejected");
                last_reason = format!("question {r}");
                continue;
            }
            let a_prompt = self.prompts.build_answer_prompt(doc, &question)?;
            let params = self.attempt_params(iteration, &doc.id, attempt, "answer");
            let answer = match self.backend.generate(model, &a_prompt.messages, &params) {
                Ok(a) => a.trim().to_owned(),
                Err(e) => {
                    last_reason = backend_reason(&e);
                    continue;
                }
            };
            if let Err(r) = validate_answer(&answer, &self.settings.validation) {
                debug!(doc = %doc.id, attempt, %r, "answer rejected");
                last_reason = format!("answer {r}");
                continue;
            }
            return Ok(DocOutcome::Pair {
                pair: QAPair {
                    id: QAPair::make_id(iteration, &doc.id),
                    iteration,
                    doc_id: doc.id.clone(),
                    question,
                    answer,
                },
                extra_attempts: attempt as usize,
                truncated,
            });
        }
        Ok(DocOutcome::Failed {
            reason: last_reason,
            truncated,
        })
    }

    /// Generates at most one validated QA pair per document.
    ///
    /// Documents that never validate are excluded and listed in the stats;
    /// the call fails when their share exceeds `max_failure_fraction`.
    pub fn generate_iteration_dataset(
        &self,
        docs: &[KnowledgeDocument],
        model: &ModelRef,
        iteration: u32,
    ) -> Result<IterationDataset, GenerationError> {
        let outcomes = bounded_map(docs, self.max_parallel, |doc| {
            self.generate_one(doc, model, iteration)
        });
        let mut stats = GenerationStats::default();
        let mut pairs = Vec::with_capacity(docs.len());
        for (doc, outcome) in docs.iter().zip(outcomes) {
            match outcome? {
                DocOutcome::Pair {
                    pair,
                    extra_attempts,
                    truncated,
                } => {
                    stats.generated += 1;
                    stats.regenerated += extra_attempts;
                    stats.truncated += truncated as usize;
                    pairs.push(pair);
                }
                DocOutcome::Failed { reason, truncated } => {
                    stats.rejected += 1;
                    stats.regenerated += self.settings.regenerate_attempts as usize;
                    stats.truncated += truncated as usize;
                    stats.failures.push(DocFailure {
                        doc_id: doc.id.clone(),
                        reason,
                    });
                }
            }
        }
        check_failure_gate(stats.rejected, docs.len(), self.settings.max_failure_fraction)
            .map_err(|()| GenerationError::TooManyRejected {
                rejected: stats.rejected,
                total: docs.len(),
                limit: self.settings.max_failure_fraction,
                failures: stats.failures.clone(),
            })?;
        pairs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        Ok(IterationDataset {
            iteration,
            pairs,
            stats,
        })
    }
}

fn backend_reason(e: &BackendError) -> String {
    format!("backend: {e}")
}

/// `Err` when `failed / total` is strictly above `limit`.
pub(crate) fn check_failure_gate(failed: usize, total: usize, limit: f64) -> Result<(), ()> {
    if total > 0 && failed as f64 / total as f64 > limit {
        Err(())
    } else {
        Ok(())
    }
}
