//! Fine-tuning through an out-of-process adapter.
//!
//! The adapter contract is closed over files:
//!
//! ```text
//! <adapter> --base <name-or-dir> --data <train.jsonl> --out <dir> --config <config.json>
//! ```
//!
//! On exit code 0 the adapter must have written `<out>/result.json` holding
//! `{"model_ref": {"backend_url": ..., "model_name": ...}}`, the serving
//! handle of the new model generation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::backend::{ModelRef, ModelRole};
use crate::generation::QAPair;
use crate::jsonl::{self, file_digest, JsonlError};

pub const RESULT_FILE: &str = "result.json";

#[derive(Debug, thiserror::Error)]
pub enum TrainerError {
    #[error("no adapter command configured")]
    NotConfigured,
    #[error("training set {path}: {reason}")]
    InvalidTrainingSet { path: PathBuf, reason: String },
    #[error("cannot start adapter {command}: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("adapter exited with {}: {stderr}", .code.map(|c| format!("code {c}")).unwrap_or_else(|| "a signal".into()))]
    AdapterFailed { code: Option<i32>, stderr: String },
    #[error("adapter did not finish within {seconds}s")]
    Timeout { seconds: u64 },
    #[error("invalid {path}: {reason}")]
    InvalidResult { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("lineage cycle through iteration {0}")]
    LineageCycle(u32),
    #[error("lineage entry {0} has no recorded parent entry")]
    MissingParent(u32),
    #[error("digest mismatch for {path}: recorded {expected}, found {actual}")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainerError + '_ {
    move |source| TrainerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Hyperparameters handed to the adapter verbatim as its config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Executable followed by fixed leading arguments.
    pub adapter_command: Vec<String>,
    pub lora_rank: u32,
    pub lora_alpha: u32,
    pub lora_target: String,
    pub epochs: u32,
    pub learning_rate: f64,
    pub extra: BTreeMap<String, String>,
    pub timeout_seconds: u64,
    /// Train every generation from the base model instead of the previous generation.
    pub from_base: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            adapter_command: Vec::new(),
            lora_rank: 4,
            lora_alpha: 8,
            lora_target: "all".into(),
            epochs: 3,
            learning_rate: 1e-4,
            extra: BTreeMap::new(),
            timeout_seconds: 24 * 60 * 60,
            from_base: false,
        }
    }
}

/// Trainer-facing sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingRecord {
    pub instruction: String,
    pub output: String,
}

impl From<&QAPair> for TrainingRecord {
    fn from(p: &QAPair) -> Self {
        Self {
            instruction: p.question.clone(),
            output: p.answer.clone(),
        }
    }
}

pub fn write_training_set(path: &Path, pairs: &[QAPair]) -> Result<String, JsonlError> {
    let records: Vec<TrainingRecord> = pairs.iter().map(TrainingRecord::from).collect();
    jsonl::write(path, &records)
}

/// Reads a trainer-facing dataset, rejecting empty files and schema violations.
pub fn read_training_set(path: &Path) -> Result<Vec<TrainingRecord>, TrainerError> {
    let invalid = |reason: String| TrainerError::InvalidTrainingSet {
        path: path.to_path_buf(),
        reason,
    };
    let records = jsonl::read::<TrainingRecord>(path).map_err(|e| invalid(e.to_string()))?;
    if records.is_empty() {
        return Err(invalid("no samples".into()));
    }
    Ok(records.into_iter().map(|r| r.value).collect())
}

/// One model generation. Entry 0 is the base model and has no parent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelLineage {
    pub iteration: u32,
    pub model_ref: ModelRef,
    pub parent: Option<u32>,
    /// Adapter output directory, relative to the run directory.
    pub artifact_path: Option<String>,
    pub training_set_digest: Option<String>,
}

impl ModelLineage {
    pub fn root(model_ref: ModelRef) -> Self {
        Self {
            iteration: 0,
            model_ref,
            parent: None,
            artifact_path: None,
            training_set_digest: None,
        }
    }

    /// What the adapter receives as `--base` when training from this entry.
    pub fn base_argument(&self, workspace: &Path) -> String {
        match &self.artifact_path {
            Some(rel) => workspace.join(rel).display().to_string(),
            None => self.model_ref.model_name.clone(),
        }
    }
}

/// Follows parent links from `latest` back to the root; returns root first.
pub fn lineage_chain(
    entries: &[ModelLineage],
    latest: &ModelLineage,
) -> Result<Vec<ModelLineage>, TrainerError> {
    let by_iteration: HashMap<u32, &ModelLineage> =
        entries.iter().map(|e| (e.iteration, e)).collect();
    let mut seen = HashSet::new();
    let mut chain = vec![latest.clone()];
    seen.insert(latest.iteration);
    let mut cursor = latest;
    while let Some(parent) = cursor.parent {
        if !seen.insert(parent) {
            return Err(TrainerError::LineageCycle(parent));
        }
        cursor = by_iteration
            .get(&parent)
            .copied()
            .ok_or(TrainerError::MissingParent(cursor.iteration))?;
        chain.push(cursor.clone());
    }
    chain.reverse();
    Ok(chain)
}

#[derive(Debug, Deserialize)]
struct AdapterResult {
    model_ref: AdapterModelRef,
}

#[derive(Debug, Deserialize)]
struct AdapterModelRef {
    backend_url: String,
    model_name: String,
}

/// Where one fine-tuning step reads and writes, relative to the run directory.
#[derive(Debug, Clone)]
pub struct TrainingPaths {
    pub workspace: PathBuf,
    pub data: String,
    pub config: String,
    pub out: String,
}

pub struct AdapterTrainer<'a> {
    pub config: &'a TrainerConfig,
}

impl AdapterTrainer<'_> {
    /// Trains the child of `parent` (or of `root` under `from_base`) on the
    /// dataset at `paths.data` and returns the child's lineage entry.
    pub fn fine_tune(
        &self,
        parent: &ModelLineage,
        root: &ModelLineage,
        paths: &TrainingPaths,
    ) -> Result<ModelLineage, TrainerError> {
        let (program, fixed_args) = self
            .config
            .adapter_command
            .split_first()
            .ok_or(TrainerError::NotConfigured)?;
        let data = paths.workspace.join(&paths.data);
        read_training_set(&data)?;
        let digest = file_digest(&data).map_err(io_err(&data))?;

        let config_path = paths.workspace.join(&paths.config);
        let config_json = serde_json::to_vec_pretty(self.config).expect("config serializes");
        fs::write(&config_path, config_json).map_err(io_err(&config_path))?;

        let out = paths.workspace.join(&paths.out);
        if out.exists() {
            fs::remove_dir_all(&out).map_err(io_err(&out))?;
        }
        fs::create_dir_all(&out).map_err(io_err(&out))?;

        let base = if self.config.from_base { root } else { parent };
        let mut child = Command::new(program)
            .args(fixed_args)
            .arg("--base")
            .arg(base.base_argument(&paths.workspace))
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&out)
            .arg("--config")
            .arg(&config_path)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|source| TrainerError::Spawn {
                command: program.clone(),
                source,
            })?;

        let mut stderr_pipe = child.stderr.take().expect("stderr piped");
        let stderr_reader = thread::spawn(move || {
            let mut buf = String::new();
            let _ = stderr_pipe.read_to_string(&mut buf);
            buf
        });
        let status = match child
            .wait_timeout(Duration::from_secs(self.config.timeout_seconds))
            .map_err(io_err(&out))?
        {
            Some(status) => status,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(TrainerError::Timeout {
                    seconds: self.config.timeout_seconds,
                });
            }
        };
        let stderr = stderr_reader.join().unwrap_or_default();
        if !status.success() {
            return Err(TrainerError::AdapterFailed {
                code: status.code(),
                stderr: stderr.trim().to_owned(),
            });
        }

        let result_path = out.join(RESULT_FILE);
        let raw = fs::read_to_string(&result_path).map_err(|e| TrainerError::InvalidResult {
            path: result_path.clone(),
            reason: e.to_string(),
        })?;
        let result: AdapterResult =
            serde_json::from_str(&raw).map_err(|e| TrainerError::InvalidResult {
                path: result_path.clone(),
                reason: e.to_string(),
            })?;
        if result.model_ref.model_name.trim().is_empty() {
            return Err(TrainerError::InvalidResult {
                path: result_path,
                reason: "empty model_name".into(),
            });
        }
        Ok(ModelLineage {
            iteration: parent.iteration + 1,
            model_ref: ModelRef::new(
                result.model_ref.backend_url,
                result.model_ref.model_name,
                ModelRole::Generator,
            ),
            parent: Some(parent.iteration),
            artifact_path: Some(paths.out.clone()),
            training_set_digest: Some(digest),
        })
    }
}

/// Recomputes the digest of the dataset a lineage entry was trained on.
pub fn verify_training_digest(
    entry: &ModelLineage,
    dataset: &Path,
) -> Result<(), TrainerError> {
    let Some(expected) = &entry.training_set_digest else {
        return Ok(());
    };
    let actual = file_digest(dataset).map_err(io_err(dataset))?;
    if &actual != expected {
        return Err(TrainerError::DigestMismatch {
            path: dataset.to_path_buf(),
            expected: expected.clone(),
            actual,
        });
    }
    Ok(())
}
