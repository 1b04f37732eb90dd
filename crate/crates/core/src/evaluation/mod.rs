//! Held-out evaluation: corpus BLEU of a model's answers and its score
//! relative to the benchmark model, `BLEU(model) / BLEU(benchmark)`.

mod bleu;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, ChatMessage, GenerationParams, ModelRef, ModelRole};
use crate::corpus::EvalPair;
use crate::generation::check_failure_gate;
use crate::parallel::bounded_map;

pub use bleu::{corpus_bleu, corpus_stats, tokenize, BleuConfig, BleuError, BleuStats, Smoothing, Tokenization};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("baseline BLEU must be in (0, 1], got {0}")]
    BadBaseline(f64),
    #[error("empty evaluation set")]
    EmptyEvalSet,
    #[error("{failed} of {total} evaluation questions failed (limit {limit}); first: {first}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        limit: f64,
        first: String,
    },
    #[error(transparent)]
    Bleu(#[from] BleuError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub params: GenerationParams,
    pub bleu: BleuConfig,
    pub max_failure_fraction: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            params: GenerationParams::greedy(),
            bleu: BleuConfig::default(),
            max_failure_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub id: String,
    pub candidate: String,
    pub sentence_bleu: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iteration: u32,
    pub model: String,
    pub model_bleu: f64,
    pub baseline_bleu: f64,
    pub relative_score: f64,
    pub per_question: Vec<QuestionResult>,
}

/// `model_bleu / baseline_bleu`.
pub fn relative_score(model_bleu: f64, baseline_bleu: f64) -> Result<f64, EvalError> {
    validate_baseline(baseline_bleu)?;
    Ok(model_bleu / baseline_bleu)
}

fn validate_baseline(baseline_bleu: f64) -> Result<(), EvalError> {
    if baseline_bleu > 0.0 && baseline_bleu <= 1.0 {
        Ok(())
    } else {
        Err(EvalError::BadBaseline(baseline_bleu))
    }
}

pub struct Evaluator<'a> {
    pub backend: &'a dyn Backend,
    pub config: &'a EvaluationConfig,
    pub max_parallel: usize,
}

impl Evaluator<'_> {
    /// Answers every question and scores the answers with corpus BLEU.
    /// Failed generations count as empty answers, within the failure gate.
    pub fn measure(
        &self,
        model: &ModelRef,
        eval_set: &[EvalPair],
    ) -> Result<(f64, Vec<QuestionResult>), EvalError> {
        if eval_set.is_empty() {
            return Err(EvalError::EmptyEvalSet);
        }
        let model = model.with_role(ModelRole::Evaluatee);
        let answers = bounded_map(eval_set, self.max_parallel, |pair| {
            self.backend.generate(
                &model,
                &[ChatMessage::user(pair.question.clone())],
                &self.config.params,
            )
        });
        let mut per_question = Vec::with_capacity(eval_set.len());
        let mut candidates = Vec::with_capacity(eval_set.len());
        for (pair, answer) in eval_set.iter().zip(answers) {
            let (candidate, error) = match answer {
                Ok(text) => (text.trim().to_owned(), None),
                Err(e) => (String::new(), Some(e.to_string())),
            };
            let sentence_bleu = corpus_bleu(
                &[candidate.as_str()],
                &[pair.reference_answer.as_str()],
                &self.config.bleu,
            )?;
            candidates.push(candidate.clone());
            per_question.push(QuestionResult {
                id: pair.id.clone(),
                candidate,
                sentence_bleu,
                error,
            });
        }
        let failed: Vec<&QuestionResult> = per_question.iter().filter(|q| q.error.is_some()).collect();
        check_failure_gate(failed.len(), eval_set.len(), self.config.max_failure_fraction).map_err(
            |()| EvalError::TooManyFailures {
                failed: failed.len(),
                total: eval_set.len(),
                limit: self.config.max_failure_fraction,
                first: failed
                    .first()
                    .map(|q| format!("{}: {}", q.id, q.error.as_deref().unwrap_or_default()))
                    .unwrap_or_default(),
            },
        )?;
        let references: Vec<&str> = eval_set.iter().map(|p| p.reference_answer.as_str()).collect();
        let candidates: Vec<&str> = candidates.iter().map(String::as_str).collect();
        let model_bleu = corpus_bleu(&candidates, &references, &self.config.bleu)?;
        Ok((model_bleu, per_question))
    }

    pub fn evaluate_model(
        &self,
        model: &ModelRef,
        eval_set: &[EvalPair],
        baseline_bleu: f64,
        iteration: u32,
    ) -> Result<EvalReport, EvalError> {
        validate_baseline(baseline_bleu)?;
        let (model_bleu, per_question) = self.measure(model, eval_set)?;
        Ok(EvalReport {
            iteration,
            model: model.model_name.clone(),
            model_bleu,
            baseline_bleu,
            relative_score: relative_score(model_bleu, baseline_bleu)?,
            per_question,
        })
    }
}

/// One row per report: `iteration,model_bleu,relative_score`.
pub fn curve_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("iteration,model_bleu,relative_score\n");
    for r in reports {
        let _ = writeln!(out, "{},{},{}", r.iteration, r.model_bleu, r.relative_score);
    }
    out
}

pub fn write_curve_csv(path: &Path, reports: &[EvalReport]) -> Result<(), EvalError> {
    std::fs::write(path, curve_csv(reports)).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockFailure};

    fn eval_set() -> Vec<EvalPair> {
        (0..4)
            .map(|i| EvalPair {
                id: format!("e{i}"),
                question: format!("How do I clear alarm {i}?"),
                reference_answer: format!("Reseat component C{i} and confirm the alarm clears."),
            })
            .collect()
    }

    #[test]
    fn baseline_against_itself_scores_one() {
        let mock = MockBackend::new();
        let (config, backend) = (EvaluationConfig::default(), &mock);
        let ev = Evaluator { backend, config: &config, max_parallel: 2 };
        let model = ModelRef::new("mock://", "hq", ModelRole::Evaluatee);
        let (baseline, _) = ev.measure(&model, &eval_set()).unwrap();
        let report = ev.evaluate_model(&model, &eval_set(), baseline, 0).unwrap();
        assert_eq!(report.relative_score, 1.0);
    }

    #[test]
    fn echoing_references_gives_inverse_baseline() {
        let mock = eval_set()
            .into_iter()
            .fold(MockBackend::new(), |m, p| m.with_reply(p.question, p.reference_answer));
        let (config, backend) = (EvaluationConfig::default(), &mock);
        let ev = Evaluator { backend, config: &config, max_parallel: 2 };
        let model = ModelRef::new("mock://", "oracle", ModelRole::Generator);
        let report = ev.evaluate_model(&model, &eval_set(), 0.4, 3).unwrap();
        assert_eq!(report.model_bleu, 1.0);
        assert_eq!(report.relative_score, 1.0 / 0.4);
        assert!(report.per_question.iter().all(|q| q.sentence_bleu == 1.0));
    }

    #[test]
    fn baseline_must_be_positive() {
        let mock = MockBackend::new();
        let (config, backend) = (EvaluationConfig::default(), &mock);
        let ev = Evaluator { backend, config: &config, max_parallel: 1 };
        let model = ModelRef::new("mock://", "m", ModelRole::Evaluatee);
        assert!(matches!(
            ev.evaluate_model(&model, &eval_set(), 0.0, 0),
            Err(EvalError::BadBaseline(_))
        ));
    }

    #[test]
    fn failures_beyond_gate() {
        let mock = MockBackend::new().fail_generation_containing("alarm", MockFailure::Transport);
        let (config, backend) = (EvaluationConfig::default(), &mock);
        let ev = Evaluator { backend, config: &config, max_parallel: 1 };
        let model = ModelRef::new("mock://", "m", ModelRole::Evaluatee);
        assert!(matches!(
            ev.measure(&model, &eval_set()),
            Err(EvalError::TooManyFailures { failed: 4, total: 4, .. })
        ));
    }

    #[test]
    fn linear_in_model_bleu() {
        let a = relative_score(0.2, 0.5).unwrap();
        let b = relative_score(0.4, 0.5).unwrap();
        assert_eq!(b, 2.0 * a);
    }

    #[test]
    fn csv_rows() {
        let report = EvalReport {
            iteration: 2,
            model: "m".into(),
            model_bleu: 0.25,
            baseline_bleu: 0.5,
            relative_score: 0.5,
            per_question: vec![],
        };
        assert_eq!(curve_csv(&[report]), "iteration,model_bleu,relative_score\n2,0.25,0.5\n");
    }
}
