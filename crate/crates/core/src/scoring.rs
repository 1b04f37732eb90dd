//! Instruction-following difficulty (IFD) under a fixed scorer model.
//!
//! For an answer `A` of `N` scorer tokens:
//!
//! * conditioned score `s(A|Q) = -(1/N) Σ log P(a_i | Q, a_<i)`
//! * direct score `s(A) = -(1/N) Σ log P(a_i | a_<i)`
//! * `IFD(Q, A) = s(A|Q) / s(A)`
//!
//! Only answer tokens enter either mean. A high IFD means the question gives
//! the scorer little help in predicting the answer.

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError, ModelRef, ScoredContinuation};
use crate::generation::{check_failure_gate, render_placeholders, QAPair, QUESTION};
use crate::jsonl::{self, JsonlError};
use crate::num::Scalar;
use crate::parallel::bounded_map;

#[derive(Debug, thiserror::Error)]
pub enum ScoringError {
    #[error("cannot average an empty logprob list")]
    EmptyScores,
    #[error("no pairs to score")]
    EmptyDataset,
    #[error("{qa_id}: token count differs between conditioned ({conditioned}) and direct ({direct}) scoring")]
    TokenCountMismatch {
        qa_id: String,
        conditioned: usize,
        direct: usize,
    },
    #[error("{qa_id}: degenerate direct score {direct}")]
    DegenerateDirect { qa_id: String, direct: f64 },
    #[error("{qa_id}: {source}")]
    Backend {
        qa_id: String,
        #[source]
        source: BackendError,
    },
    #[error("invalid scoring frame: {0}")]
    Frame(String),
    #[error("{failed} of {total} pairs could not be scored (limit {limit})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        limit: f64,
    },
    #[error(transparent)]
    Io(#[from] JsonlError),
}

/// Mean negative log-likelihood of a token sequence, `-(1/N) Σ logprob`.
pub fn mean_nll<F: Scalar>(logprobs: &[F]) -> Result<F, ScoringError> {
    if logprobs.is_empty() {
        return Err(ScoringError::EmptyScores);
    }
    let sum: F = logprobs.iter().copied().sum();
    Ok(-sum / F::from_count(logprobs.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IfdScore<F> {
    pub conditioned_score: F,
    pub direct_score: F,
    pub ifd: F,
    pub token_count: usize,
}

impl<F: Scalar> IfdScore<F> {
    /// Combines the two per-token logprob lists of one answer. Direct scores
    /// below `min_direct` yield `None`: the ratio is undefined at zero.
    pub fn from_logprobs(
        conditioned: &[F],
        direct: &[F],
        min_direct: F,
    ) -> Result<Option<Self>, ScoringError> {
        let conditioned_score = mean_nll(conditioned)?;
        let direct_score = mean_nll(direct)?;
        if direct_score < min_direct {
            return Ok(None);
        }
        Ok(Some(Self {
            conditioned_score,
            direct_score,
            ifd: conditioned_score / direct_score,
            token_count: conditioned.len(),
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord<F = f64> {
    pub qa_id: String,
    pub conditioned_score: F,
    pub direct_score: F,
    pub ifd: F,
    pub token_count: usize,
}

impl<F: Copy> ScoreRecord<F> {
    pub fn new(qa_id: impl Into<String>, score: IfdScore<F>) -> Self {
        Self {
            qa_id: qa_id.into(),
            conditioned_score: score.conditioned_score,
            direct_score: score.direct_score,
            ifd: score.ifd,
            token_count: score.token_count,
        }
    }
}

/// How the scorer sees the question for the conditioned score, and what (if
/// anything) precedes the answer for the direct score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub conditioned_frame: String,
    pub direct_frame: String,
    pub min_direct_score: f64,
    pub max_failure_fraction: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            conditioned_frame: "Question: {Question}\nAnswer:\n".into(),
            direct_frame: String::new(),
            min_direct_score: 1e-9,
            max_failure_fraction: 0.2,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<(), ScoringError> {
        if !self.conditioned_frame.contains("{Question}") {
            return Err(ScoringError::Frame(
                "conditioned_frame must contain {Question}".into(),
            ));
        }
        if self.direct_frame.contains("{Question}") {
            return Err(ScoringError::Frame(
                "direct_frame must not reference the question".into(),
            ));
        }
        Ok(())
    }

    pub fn conditioned_context(&self, question: &str) -> String {
        render_placeholders(&self.conditioned_frame, &[(QUESTION, question)])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub qa_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDataset {
    pub records: Vec<ScoreRecord>,
    pub exclusions: Vec<Exclusion>,
}

impl ScoredDataset {
    pub fn write_jsonl(&self, path: &std::path::Path) -> Result<String, JsonlError> {
        jsonl::write(path, &self.records)
    }

    pub fn read_records(path: &std::path::Path) -> Result<Vec<ScoreRecord>, JsonlError> {
        Ok(jsonl::read(path)?.into_iter().map(|r| r.value).collect())
    }
}

pub struct IfdScorer<'a> {
    pub backend: &'a dyn Backend,
    pub scorer: &'a ModelRef,
    pub config: &'a ScoringConfig,
    pub max_parallel: usize,
}

impl IfdScorer<'_> {
    fn combine(
        &self,
        pair: &QAPair,
        conditioned: Result<ScoredContinuation, BackendError>,
        direct: Result<ScoredContinuation, BackendError>,
    ) -> Result<ScoreRecord, ScoringError> {
        let wrap = |source| ScoringError::Backend {
            qa_id: pair.id.clone(),
            source,
        };
        let conditioned = conditioned.map_err(wrap)?.logprobs();
        let direct = direct.map_err(wrap)?.logprobs();
        if conditioned.len() != direct.len() {
            return Err(ScoringError::TokenCountMismatch {
                qa_id: pair.id.clone(),
                conditioned: conditioned.len(),
                direct: direct.len(),
            });
        }
        match IfdScore::from_logprobs(&conditioned, &direct, self.config.min_direct_score)? {
            Some(score) => Ok(ScoreRecord::new(&pair.id, score)),
            None => Err(ScoringError::DegenerateDirect {
                qa_id: pair.id.clone(),
                direct: mean_nll(&direct)?,
            }),
        }
    }

    fn requests(&self, pair: &QAPair) -> [(String, String); 2] {
        [
            (self.config.conditioned_context(&pair.question), pair.answer.clone()),
            (self.config.direct_frame.clone(), pair.answer.clone()),
        ]
    }

    /// Scores one pair, issuing the conditioned and direct requests concurrently.
    pub fn score_pair(&self, pair: &QAPair) -> Result<ScoreRecord, ScoringError> {
        self.config.validate()?;
        let requests = self.requests(pair);
        let mut results = bounded_map(&requests, 2, |(ctx, cont)| {
            self.backend.score_continuation(self.scorer, ctx, cont)
        })
        .into_iter();
        let conditioned = results.next().expect("two results");
        let direct = results.next().expect("two results");
        self.combine(pair, conditioned, direct)
    }

    /// Scores every pair. Individual failures (including degenerate direct
    /// scores) become exclusions; too many of them fail the call.
    pub fn score_dataset(&self, pairs: &[QAPair]) -> Result<ScoredDataset, ScoringError> {
        if pairs.is_empty() {
            return Err(ScoringError::EmptyDataset);
        }
        self.config.validate()?;
        let requests: Vec<(String, String)> =
            pairs.iter().flat_map(|p| self.requests(p)).collect();
        let mut results = bounded_map(&requests, self.max_parallel, |(ctx, cont)| {
            self.backend.score_continuation(self.scorer, ctx, cont)
        })
        .into_iter();

        let mut records = Vec::with_capacity(pairs.len());
        let mut exclusions = Vec::new();
        for pair in pairs {
            let conditioned = results.next().expect("two results per pair");
            let direct = results.next().expect("two results per pair");
            match self.combine(pair, conditioned, direct) {
                Ok(record) => records.push(record),
                Err(e) => {
                    tracing::warn!(qa_id = %pair.id, error = %e, "pair excluded from scoring");
                    exclusions.push(Exclusion {
                        qa_id: pair.id.clone(),
                        reason: e.to_string(),
                    });
                }
            }
        }
        check_failure_gate(exclusions.len(), pairs.len(), self.config.max_failure_fraction)
            .map_err(|()| ScoringError::TooManyFailures {
                failed: exclusions.len(),
                total: pairs.len(),
                limit: self.config.max_failure_fraction,
            })?;
        Ok(ScoredDataset {
            records,
            exclusions,
        })
    }
}
