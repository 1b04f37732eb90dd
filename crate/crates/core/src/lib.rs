//! Iterative self-evolution fine-tuning orchestration.
//!
//! Each iteration generates one QA pair per domain document with the current
//! model, scores the new pairs by instruction-following difficulty (IFD)
//! under a fixed scorer, retrieves high-IFD historical pairs, fine-tunes the
//! next model generation through an external trainer adapter, and evaluates
//! it with corpus BLEU relative to a benchmark model.

pub mod backend;
pub mod config;
pub mod corpus;
pub mod evaluation;
pub mod generation;
pub mod jsonl;
pub mod num;
pub mod pipeline;
pub mod scoring;
pub mod selection;
pub mod trainer;
mod parallel;
mod seed;

pub use backend::{Backend, ModelRef, ModelRole};
pub use corpus::{EvalPair, KnowledgeDocument};
pub use generation::{IterationDataset, QAPair};
pub use pipeline::{Pipeline, PipelineError, RunManifest};

/// Per-pair IFD score at the precision the pipeline runs in.
pub type ScoreRecord = scoring::ScoreRecord<f64>;
/// IFD ingredients at the precision the pipeline runs in.
pub type IfdScore = scoring::IfdScore<f64>;
