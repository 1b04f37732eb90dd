//! The iteration controller: generate, score, select, train, evaluate, repeat.
//!
//! State lives on disk. Each phase writes its artifacts under the run
//! directory, then appends a record to the manifest, so a crashed or
//! interrupted run resumes from the first phase without a record.

mod lock;
pub mod manifest;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{info, warn};

use crate::backend::{Backend, Backends, ModelRole};
use crate::config::RunConfig;
use crate::corpus::{self, CorpusError, EvalPair, KnowledgeDocument};
use crate::evaluation::{EvalError, EvalReport, Evaluator, QuestionResult};
use crate::generation::{GenerationError, IterationDataset, PromptSet, PromptTemplate, QAPair, QaGenerator};
use crate::jsonl::{file_digest, JsonlError};
use crate::scoring::{IfdScorer, ScoredDataset, ScoringError};
use crate::selection::{self, Candidate, SelectionError};
use crate::trainer::{self, AdapterTrainer, ModelLineage, TrainerError, TrainingPaths};

pub use lock::RunLock;
pub use manifest::{
    ArtifactRef, BaselineRecord, EvaluateRecord, Failure, GenerateRecord, IterationRecord, Marker,
    Phase, PhaseId, RunManifest, RunStatus, ScoreRecordSet, SelectRecord, Templates, TrainRecord,
    MANIFEST_FILE,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Evaluation(#[from] EvalError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt manifest: {0}")]
    Manifest(String),
    #[error("digest mismatch for {path}: manifest has {expected}, file has {actual}")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("config hash {actual} does not match the run's {expected}")]
    ConfigMismatch { expected: String, actual: String },
    #[error("{0} template changed since the run started")]
    TemplateChanged(&'static str),
    #[error("{0} already holds a run; use resume")]
    AlreadyExists(PathBuf),
    #[error("run directory is locked by {holder} (remove {path} if that process is gone)")]
    Locked { path: PathBuf, holder: String },
    #[error("next phase is {next}, not {requested}")]
    OutOfOrder { next: String, requested: Phase },
    #[error("run is already complete")]
    Finished,
}

impl PipelineError {
    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
        move |source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Errors caused by bad input rather than by a failing backend or trainer.
    pub fn is_validation(&self) -> bool {
        match self {
            PipelineError::Config(_)
            | PipelineError::Corpus(_)
            | PipelineError::Manifest(_)
            | PipelineError::DigestMismatch { .. }
            | PipelineError::ConfigMismatch { .. }
            | PipelineError::TemplateChanged(_)
            | PipelineError::AlreadyExists(_)
            | PipelineError::OutOfOrder { .. }
            | PipelineError::Finished => true,
            PipelineError::Generation(e) => matches!(e, GenerationError::Template(_)),
            _ => false,
        }
    }
}

/// What the baseline phase writes next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub model: String,
    pub bleu: f64,
    pub per_question: Vec<QuestionResult>,
}

pub struct Pipeline {
    run_dir: PathBuf,
    manifest: RunManifest,
    backends: Backends,
    docs: Vec<KnowledgeDocument>,
    eval_set: Vec<EvalPair>,
    prompts: PromptSet,
    _lock: RunLock,
}

impl Pipeline {
    /// Starts a new run in `run_dir`. `mock` replaces the default mock backend
    /// used for `mock*` model URLs.
    pub fn create(
        run_dir: &Path,
        config: RunConfig,
        mock: Option<Arc<dyn Backend>>,
    ) -> Result<Self, PipelineError> {
        config
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        fs::create_dir_all(run_dir).map_err(PipelineError::io(run_dir))?;
        let lock = RunLock::acquire(run_dir)?;
        let manifest_path = run_dir.join(MANIFEST_FILE);
        if manifest_path.exists() {
            return Err(PipelineError::AlreadyExists(run_dir.to_path_buf()));
        }
        let inputs = Inputs::load(&config)?;
        let now = manifest::now_ms();
        let mut manifest = RunManifest {
            format_version: manifest::FORMAT_VERSION,
            config_hash: config.hash(),
            templates: inputs.templates(),
            corpus: inputs.corpus_ref.clone(),
            eval_set: inputs.eval_ref.clone(),
            defaults_in_effect: defaults_in_effect(&config),
            status: RunStatus::Running,
            failure: None,
            stop_reason: None,
            baseline: None,
            lineage: vec![ModelLineage::root(
                config.base_model.model_ref(ModelRole::Generator),
            )],
            iterations: Vec::new(),
            next_seq: 0,
            created_at_ms: now,
            updated_at_ms: now,
            config,
        };
        if let Some(bleu) = manifest.config.baseline_bleu {
            manifest.baseline = Some(BaselineRecord {
                marker: manifest.next_marker(),
                bleu,
                model: None,
                report: None,
            });
        }
        manifest.save(&manifest_path)?;
        info!(
            run_dir = %run_dir.display(),
            documents = inputs.docs.len(),
            eval_questions = inputs.eval_set.len(),
            "run created"
        );
        Ok(Self::assemble(run_dir, manifest, inputs, mock, lock))
    }

    /// Reopens an existing run, verifying the config and every recorded artifact.
    /// `path` may be the run directory or its manifest file.
    pub fn open(
        path: &Path,
        expected: Option<&RunConfig>,
        mock: Option<Arc<dyn Backend>>,
    ) -> Result<Self, PipelineError> {
        let run_dir = run_dir_of(path);
        let lock = RunLock::acquire(&run_dir)?;
        let manifest = RunManifest::load(&run_dir.join(MANIFEST_FILE))?;
        let actual = manifest.config.hash();
        if actual != manifest.config_hash {
            return Err(PipelineError::Manifest(
                "config snapshot does not match config_hash".into(),
            ));
        }
        if let Some(expected) = expected {
            let hash = expected.hash();
            if hash != manifest.config_hash {
                return Err(PipelineError::ConfigMismatch {
                    expected: manifest.config_hash.clone(),
                    actual: hash,
                });
            }
        }
        let inputs = Inputs::load(&manifest.config)?;
        verify(&run_dir, &manifest, &inputs)?;
        Ok(Self::assemble(&run_dir, manifest, inputs, mock, lock))
    }

    fn assemble(
        run_dir: &Path,
        manifest: RunManifest,
        inputs: Inputs,
        mock: Option<Arc<dyn Backend>>,
        lock: RunLock,
    ) -> Self {
        let backend_config = manifest.config.backend.clone();
        let backends = match mock {
            Some(mock) => Backends::with_mock(backend_config, mock),
            None => Backends::new(backend_config),
        };
        Self {
            run_dir: run_dir.to_path_buf(),
            manifest,
            backends,
            docs: inputs.docs,
            eval_set: inputs.eval_set,
            prompts: inputs.prompts,
            _lock: lock,
        }
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.run_dir.join(MANIFEST_FILE)
    }

    pub fn into_manifest(self) -> RunManifest {
        self.manifest
    }

    /// The phase [`step`](Self::step) would run, or `None` once the run is complete.
    pub fn next_phase(&self) -> Option<PhaseId> {
        let m = &self.manifest;
        if m.status == RunStatus::Completed {
            return None;
        }
        if m.baseline.is_none() {
            return Some(PhaseId {
                iteration: None,
                phase: Phase::Baseline,
            });
        }
        let Some(last) = m.iterations.last() else {
            return Some(PhaseId {
                iteration: Some(0),
                phase: Phase::Generate,
            });
        };
        if let Some(phase) = last.next_phase() {
            return Some(PhaseId {
                iteration: Some(last.iteration),
                phase,
            });
        }
        (last.iteration + 1 < m.config.max_iterations).then(|| PhaseId {
            iteration: Some(last.iteration + 1),
            phase: Phase::Generate,
        })
    }

    /// Runs the next phase and persists its record. Returns `None` when
    /// there was nothing left to do.
    pub fn step(&mut self) -> Result<Option<PhaseId>, PipelineError> {
        let Some(id) = self.next_phase() else {
            if self.manifest.status != RunStatus::Completed {
                self.finish("max_iterations");
                self.save()?;
            }
            return Ok(None);
        };
        info!(phase = %id, "phase started");
        self.manifest.status = RunStatus::Running;
        let outcome = match (id.phase, id.iteration) {
            (Phase::Baseline, _) => self.baseline(),
            (Phase::Generate, Some(i)) => self.generate(i),
            (Phase::Score, Some(i)) => self.score(i),
            (Phase::Select, Some(i)) => self.select(i),
            (Phase::Train, Some(i)) => self.train(i),
            (Phase::Evaluate, Some(i)) => self.evaluate(i),
            (phase, None) => unreachable!("{phase} scheduled without an iteration"),
        };
        match outcome {
            Ok(()) => {
                self.manifest.failure = None;
                self.save()?;
                info!(phase = %id, "phase completed");
                Ok(Some(id))
            }
            Err(err) => {
                warn!(phase = %id, error = %err, "phase failed");
                self.manifest.status = RunStatus::Failed;
                self.manifest.failure = Some(Failure {
                    iteration: id.iteration,
                    phase: id.phase,
                    message: err.to_string(),
                });
                self.save()?;
                Err(err)
            }
        }
    }

    /// Runs the next phase only if it is `phase`.
    pub fn step_expecting(&mut self, phase: Phase) -> Result<PhaseId, PipelineError> {
        let next = self.next_phase().ok_or(PipelineError::Finished)?;
        let matches = next.phase == phase
            || (phase == Phase::Evaluate && next.phase == Phase::Baseline);
        if !matches {
            return Err(PipelineError::OutOfOrder {
                next: next.to_string(),
                requested: phase,
            });
        }
        self.step()?;
        Ok(next)
    }

    /// Runs phases until the run completes or `limit` phases have run.
    /// Returns the number of phases executed.
    pub fn run_phases(&mut self, limit: Option<usize>) -> Result<usize, PipelineError> {
        let mut done = 0;
        while limit.is_none_or(|l| done < l) {
            if self.step()?.is_none() {
                break;
            }
            done += 1;
        }
        Ok(done)
    }

    fn save(&mut self) -> Result<(), PipelineError> {
        self.manifest.updated_at_ms = manifest::now_ms();
        self.manifest.save(&self.run_dir.join(MANIFEST_FILE))
    }

    fn finish(&mut self, reason: &str) {
        self.manifest.status = RunStatus::Completed;
        self.manifest.stop_reason = Some(reason.into());
        info!(reason, "run completed");
    }

    fn max_parallel(&self) -> usize {
        self.backends.config().max_parallel
    }

    fn artifact(&self, rel: String) -> Result<ArtifactRef, PipelineError> {
        let path = self.run_dir.join(&rel);
        let sha256 = file_digest(&path).map_err(PipelineError::io(&path))?;
        Ok(ArtifactRef { path: rel, sha256 })
    }

    fn baseline(&mut self) -> Result<(), PipelineError> {
        let spec = self
            .manifest
            .config
            .baseline_model
            .clone()
            .ok_or_else(|| PipelineError::Config("no baseline configured".into()))?;
        let model = spec.model_ref(ModelRole::Evaluatee);
        let backend = self.backends.resolve(&model);
        let evaluator = Evaluator {
            backend: backend.as_ref(),
            config: &self.manifest.config.evaluation,
            max_parallel: self.max_parallel(),
        };
        let (bleu, per_question) = evaluator.measure(&model, &self.eval_set)?;
        crate::evaluation::relative_score(bleu, bleu)?;
        let rel = "baseline/eval.json".to_string();
        write_json(
            &self.run_dir.join(&rel),
            &BaselineReport {
                model: model.model_name.clone(),
                bleu,
                per_question,
            },
        )?;
        let report = self.artifact(rel)?;
        info!(model = %model.model_name, bleu, "baseline measured");
        self.manifest.baseline = Some(BaselineRecord {
            marker: self.manifest.next_marker(),
            bleu,
            model: Some(model.model_name),
            report: Some(report),
        });
        Ok(())
    }

    fn generate(&mut self, i: u32) -> Result<(), PipelineError> {
        let generator = self.model_at(i)?.model_ref.with_role(ModelRole::Generator);
        let backend = self.backends.resolve(&generator);
        let generator_run = QaGenerator {
            backend: backend.as_ref(),
            prompts: &self.prompts,
            settings: &self.manifest.config.generation,
            max_parallel: self.max_parallel(),
            run_seed: self.manifest.config.run_seed,
        };
        let dataset = generator_run.generate_iteration_dataset(&self.docs, &generator, i)?;
        let rel = iter_file(i, "dataset.jsonl");
        dataset.write_jsonl(&self.run_dir.join(&rel))?;
        let dataset_ref = self.artifact(rel)?;
        info!(
            iteration = i,
            pairs = dataset.pairs.len(),
            rejected = dataset.stats.rejected,
            "dataset generated"
        );
        let record = GenerateRecord {
            marker: self.manifest.next_marker(),
            generator,
            dataset: dataset_ref,
            pairs: dataset.pairs.len(),
            stats: dataset.stats,
        };
        self.manifest.iteration_mut(i).generate = Some(record);
        Ok(())
    }

    fn score(&mut self, i: u32) -> Result<(), PipelineError> {
        let pairs = self.read_dataset(i)?;
        let scorer = self.manifest.config.scorer_model.model_ref(ModelRole::Scorer);
        let backend = self.backends.resolve(&scorer);
        let scored = if pairs.is_empty() {
            ScoredDataset {
                records: Vec::new(),
                exclusions: Vec::new(),
            }
        } else {
            IfdScorer {
                backend: backend.as_ref(),
                scorer: &scorer,
                config: &self.manifest.config.scoring,
                max_parallel: self.max_parallel(),
            }
            .score_dataset(&pairs)?
        };
        let rel = iter_file(i, "scores.jsonl");
        scored.write_jsonl(&self.run_dir.join(&rel))?;
        let scores = self.artifact(rel)?;
        info!(
            iteration = i,
            scored = scored.records.len(),
            excluded = scored.exclusions.len(),
            "dataset scored"
        );
        let record = ScoreRecordSet {
            marker: self.manifest.next_marker(),
            scorer,
            scores,
            scored: scored.records.len(),
            exclusions: scored.exclusions,
        };
        self.manifest.iteration_mut(i).score = Some(record);
        Ok(())
    }

    /// Pairs of D_0..D_{i-1} that survived scoring, with their scores.
    fn history(&self, i: u32) -> Result<Vec<(QAPair, Option<crate::ScoreRecord>)>, PipelineError> {
        let mut out = Vec::new();
        for j in 0..i {
            let record = self
                .manifest
                .iteration(j)
                .and_then(|r| r.score.as_ref())
                .ok_or_else(|| PipelineError::Manifest(format!("iteration {j} has no scores")))?;
            let excluded: HashSet<&str> =
                record.exclusions.iter().map(|e| e.qa_id.as_str()).collect();
            let mut scores: HashMap<String, crate::ScoreRecord> =
                ScoredDataset::read_records(&self.run_dir.join(&record.scores.path))?
                    .into_iter()
                    .map(|s| (s.qa_id.clone(), s))
                    .collect();
            for pair in self.read_dataset(j)? {
                if excluded.contains(pair.id.as_str()) {
                    continue;
                }
                let score = scores.remove(&pair.id);
                out.push((pair, score));
            }
        }
        Ok(out)
    }

    fn select(&mut self, i: u32) -> Result<(), PipelineError> {
        let history = self.history(i)?;
        let candidates: Vec<Candidate<'_>> = history
            .iter()
            .map(|(pair, score)| Candidate {
                pair,
                score: score.as_ref(),
            })
            .collect();
        let default_k = self
            .manifest
            .iteration(i)
            .and_then(|r| r.generate.as_ref())
            .map(|g| g.pairs)
            .unwrap_or(0);
        let result = selection::select(i, &candidates, &self.manifest.config.selection, default_k)?;
        info!(
            iteration = i,
            pool = result.pool_size,
            selected = result.selected_ids.len(),
            k = result.k,
            "history selected"
        );
        let record = SelectRecord {
            marker: self.manifest.next_marker(),
            result,
        };
        self.manifest.iteration_mut(i).select = Some(record);
        Ok(())
    }

    fn train(&mut self, i: u32) -> Result<(), PipelineError> {
        let new_data = self.read_dataset(i)?;
        let selected = self
            .manifest
            .iteration(i)
            .and_then(|r| r.select.as_ref())
            .map(|s| s.result.clone())
            .ok_or_else(|| PipelineError::Manifest(format!("iteration {i} has no selection")))?;
        let mut pool = HashMap::new();
        for j in 0..i {
            for pair in self.read_dataset(j)? {
                pool.insert(pair.id.clone(), pair);
            }
        }
        let training = selection::assemble_training_set(&new_data, &selected, &pool)?;
        let data_rel = iter_file(i, "train.jsonl");
        trainer::write_training_set(&self.run_dir.join(&data_rel), &training)?;

        let parent = self.model_at(i)?.clone();
        let root = self.manifest.lineage[0].clone();
        let paths = TrainingPaths {
            workspace: self.run_dir.clone(),
            data: data_rel.clone(),
            config: iter_file(i, "trainer_config.json"),
            out: iter_file(i, "model"),
        };
        let child = AdapterTrainer {
            config: &self.manifest.config.trainer,
        }
        .fine_tune(&parent, &root, &paths)?;
        info!(
            iteration = i,
            training_size = training.len(),
            model = %child.model_ref.model_name,
            "model trained"
        );
        let training_set = self.artifact(data_rel)?;
        self.manifest.lineage.truncate(i as usize + 1);
        self.manifest.lineage.push(child);
        let record = TrainRecord {
            marker: self.manifest.next_marker(),
            training_set,
            training_size: training.len(),
            produced: i + 1,
        };
        self.manifest.iteration_mut(i).train = Some(record);
        Ok(())
    }

    fn evaluate(&mut self, i: u32) -> Result<(), PipelineError> {
        let model = self.model_at(i + 1)?.model_ref.with_role(ModelRole::Evaluatee);
        let baseline = self
            .manifest
            .baseline
            .as_ref()
            .map(|b| b.bleu)
            .ok_or_else(|| PipelineError::Manifest("baseline missing".into()))?;
        let backend = self.backends.resolve(&model);
        let report = Evaluator {
            backend: backend.as_ref(),
            config: &self.manifest.config.evaluation,
            max_parallel: self.max_parallel(),
        }
        .evaluate_model(&model, &self.eval_set, baseline, i)?;
        let rel = iter_file(i, "eval.json");
        write_json(&self.run_dir.join(&rel), &report)?;
        let report_ref = self.artifact(rel)?;
        info!(
            iteration = i,
            model = %report.model,
            bleu = report.model_bleu,
            score = report.relative_score,
            "model evaluated"
        );
        let record = EvaluateRecord {
            marker: self.manifest.next_marker(),
            model: report.model.clone(),
            report: report_ref,
            model_bleu: report.model_bleu,
            relative_score: report.relative_score,
        };
        self.manifest.iteration_mut(i).evaluate = Some(record);

        if i + 1 >= self.manifest.config.max_iterations {
            self.finish("max_iterations");
        } else if let Some(target) = self.manifest.config.stop_when_score {
            if report.relative_score >= target {
                self.finish("stop_when_score");
            }
        }
        Ok(())
    }

    fn model_at(&self, generation: u32) -> Result<&ModelLineage, PipelineError> {
        self.manifest
            .lineage
            .get(generation as usize)
            .ok_or_else(|| PipelineError::Manifest(format!("lineage has no generation {generation}")))
    }

    fn read_dataset(&self, i: u32) -> Result<Vec<QAPair>, PipelineError> {
        let record = self
            .manifest
            .iteration(i)
            .and_then(|r| r.generate.as_ref())
            .ok_or_else(|| PipelineError::Manifest(format!("iteration {i} has no dataset")))?;
        Ok(IterationDataset::read_pairs(&self.run_dir.join(&record.dataset.path))?)
    }
}

/// Creates a run and drives it to completion.
pub fn run(
    run_dir: &Path,
    config: RunConfig,
    mock: Option<Arc<dyn Backend>>,
) -> Result<RunManifest, PipelineError> {
    let mut pipeline = Pipeline::create(run_dir, config, mock)?;
    pipeline.run_phases(None)?;
    Ok(pipeline.into_manifest())
}

/// Continues a run from its first incomplete phase.
pub fn resume(
    path: &Path,
    expected: Option<&RunConfig>,
    mock: Option<Arc<dyn Backend>>,
) -> Result<RunManifest, PipelineError> {
    let mut pipeline = Pipeline::open(path, expected, mock)?;
    pipeline.run_phases(None)?;
    Ok(pipeline.into_manifest())
}

/// Reads the per-iteration evaluation reports a run has produced so far.
pub fn load_reports(run_dir: &Path, manifest: &RunManifest) -> Result<Vec<EvalReport>, PipelineError> {
    manifest
        .iterations
        .iter()
        .filter_map(|r| r.evaluate.as_ref())
        .map(|e| {
            let path = run_dir.join(&e.report.path);
            let raw = fs::read_to_string(&path).map_err(PipelineError::io(&path))?;
            serde_json::from_str(&raw)
                .map_err(|err| PipelineError::Manifest(format!("{}: {err}", path.display())))
        })
        .collect()
}

pub fn run_dir_of(path: &Path) -> PathBuf {
    if path.is_file() {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        path.to_path_buf()
    }
}

fn iter_file(i: u32, name: &str) -> String {
    format!("iter-{i:03}/{name}")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(PipelineError::io(parent))?;
    }
    let mut body = serde_json::to_vec_pretty(value).expect("report serializes");
    body.push(b'\n');
    fs::write(path, body).map_err(PipelineError::io(path))
}

struct Inputs {
    docs: Vec<KnowledgeDocument>,
    eval_set: Vec<EvalPair>,
    prompts: PromptSet,
    corpus_ref: ArtifactRef,
    eval_ref: ArtifactRef,
}

impl Inputs {
    fn load(config: &RunConfig) -> Result<Self, PipelineError> {
        let docs = corpus::load_documents(&config.corpus_path)?;
        if docs.is_empty() {
            return Err(PipelineError::Config(format!(
                "corpus {} is empty",
                config.corpus_path.display()
            )));
        }
        let eval_set = corpus::load_eval_set(&config.eval_path)?;
        if eval_set.is_empty() {
            return Err(PipelineError::Config(format!(
                "eval set {} is empty",
                config.eval_path.display()
            )));
        }
        let template = |path: &Option<PathBuf>, builtin: fn() -> PromptTemplate| match path {
            Some(p) => PromptTemplate::load(p),
            None => Ok(builtin()),
        };
        let prompts = PromptSet::new(
            template(&config.prompts.question_template, PromptTemplate::builtin_question)?,
            template(&config.prompts.answer_template, PromptTemplate::builtin_answer)?,
            config.prompts.char_budget,
        )?;
        let input_ref = |path: &Path| -> Result<ArtifactRef, PipelineError> {
            Ok(ArtifactRef {
                path: path.display().to_string(),
                sha256: file_digest(path).map_err(PipelineError::io(path))?,
            })
        };
        Ok(Self {
            corpus_ref: input_ref(&config.corpus_path)?,
            eval_ref: input_ref(&config.eval_path)?,
            docs,
            eval_set,
            prompts,
        })
    }

    fn templates(&self) -> Templates {
        let record = |t: &PromptTemplate| manifest::TemplateRecord {
            source: t.source.clone(),
            sha256: t.sha256.clone(),
        };
        Templates {
            question: record(&self.prompts.question),
            answer: record(&self.prompts.answer),
        }
    }
}

fn check_digest(path: &Path, expected: &str) -> Result<(), PipelineError> {
    let actual = file_digest(path).map_err(PipelineError::io(path))?;
    if actual != expected {
        return Err(PipelineError::DigestMismatch {
            path: path.to_path_buf(),
            expected: expected.to_owned(),
            actual,
        });
    }
    Ok(())
}

fn verify(run_dir: &Path, manifest: &RunManifest, inputs: &Inputs) -> Result<(), PipelineError> {
    for (recorded, current) in [
        (&manifest.corpus, &inputs.corpus_ref),
        (&manifest.eval_set, &inputs.eval_ref),
    ] {
        if recorded.sha256 != current.sha256 {
            return Err(PipelineError::DigestMismatch {
                path: PathBuf::from(&current.path),
                expected: recorded.sha256.clone(),
                actual: current.sha256.clone(),
            });
        }
    }
    let templates = inputs.templates();
    if templates.question.sha256 != manifest.templates.question.sha256 {
        return Err(PipelineError::TemplateChanged("question"));
    }
    if templates.answer.sha256 != manifest.templates.answer.sha256 {
        return Err(PipelineError::TemplateChanged("answer"));
    }

    let mut refs: Vec<&ArtifactRef> = Vec::new();
    if let Some(report) = manifest.baseline.as_ref().and_then(|b| b.report.as_ref()) {
        refs.push(report);
    }
    for (pos, record) in manifest.iterations.iter().enumerate() {
        if record.iteration as usize != pos {
            return Err(PipelineError::Manifest(format!(
                "iteration records out of order at {pos}"
            )));
        }
        if !record.markers_monotone() {
            return Err(PipelineError::Manifest(format!(
                "iteration {} has a phase marker without its predecessors",
                record.iteration
            )));
        }
        refs.extend(record.generate.as_ref().map(|r| &r.dataset));
        refs.extend(record.score.as_ref().map(|r| &r.scores));
        refs.extend(record.train.as_ref().map(|r| &r.training_set));
        refs.extend(record.evaluate.as_ref().map(|r| &r.report));
    }
    for artifact in refs {
        check_digest(&run_dir.join(&artifact.path), &artifact.sha256)?;
    }

    let trained = manifest
        .iterations
        .iter()
        .filter(|r| r.train.is_some())
        .count();
    if manifest.lineage.len() != trained + 1 {
        return Err(PipelineError::Manifest(format!(
            "lineage has {} entries for {trained} trained iterations",
            manifest.lineage.len()
        )));
    }
    let latest = manifest.lineage.last().expect("lineage has a root");
    trainer::lineage_chain(&manifest.lineage, latest)?;
    Ok(())
}

/// Keys whose values the method leaves open; listed when the run uses our default.
const OPEN_DEFAULTS: &[&str] = &[
    "generation.params.temperature",
    "generation.params.max_tokens",
    "generation.regenerate_attempts",
    "generation.max_failure_fraction",
    "scoring.conditioned_frame",
    "scoring.direct_frame",
    "selection.k",
    "trainer.epochs",
    "trainer.learning_rate",
    "trainer.lora_target",
    "evaluation.params.temperature",
    "evaluation.bleu.tokenization",
    "evaluation.bleu.smoothing",
    "prompts.char_budget",
];

fn defaults_in_effect(config: &RunConfig) -> Vec<String> {
    let ours = serde_json::to_value(config).expect("config serializes");
    let defaults = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let at = |v: &Value, key: &str| key.split('.').try_fold(v.clone(), |v, k| v.get(k).cloned());
    let mut notes: Vec<String> = OPEN_DEFAULTS
        .iter()
        .filter_map(|key| {
            let value = at(&ours, key)?;
            (Some(&value) == at(&defaults, key).as_ref()).then(|| match (*key, &value) {
                ("selection.k", Value::Null) => {
                    "selection.k=null (k = size of the new dataset)".to_owned()
                }
                _ => format!("{key}={value}"),
            })
        })
        .collect();
    if config.prompts.question_template.is_none() {
        notes.push(
            "prompts.question_template=builtin (notes 3 to 5 are filler; the source prompt elides them)"
                .to_owned(),
        );
    }
    notes
}
