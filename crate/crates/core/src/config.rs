//! Run configuration: one JSON document covering every phase.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{BackendConfig, ModelRef, ModelRole};
use crate::corpus::DEFAULT_CHAR_BUDGET;
use crate::evaluation::EvaluationConfig;
use crate::generation::GenerationSettings;
use crate::jsonl::sha256_hex;
use crate::scoring::ScoringConfig;
use crate::selection::SelectionConfig;
use crate::trainer::TrainerConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid override {0:?}: expected key=value")]
    OverrideSyntax(String),
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backend_url: String,
    pub model_name: String,
}

impl ModelSpec {
    pub fn model_ref(&self, role: ModelRole) -> ModelRef {
        ModelRef::new(&self.backend_url, &self.model_name, role)
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            backend_url: "mock://".into(),
            model_name: "base".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// `None` selects the shipped template.
    pub question_template: Option<PathBuf>,
    pub answer_template: Option<PathBuf>,
    pub char_budget: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            question_template: None,
            answer_template: None,
            char_budget: DEFAULT_CHAR_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus_path: PathBuf,
    pub eval_path: PathBuf,
    /// The model generation 0 that every later generation descends from.
    pub base_model: ModelSpec,
    /// Fixed for the whole run.
    pub scorer_model: ModelSpec,
    /// Benchmark model whose BLEU becomes the denominator of the relative score.
    pub baseline_model: Option<ModelSpec>,
    /// Benchmark BLEU given directly; takes precedence over `baseline_model`.
    pub baseline_bleu: Option<f64>,
    pub prompts: PromptConfig,
    pub generation: GenerationSettings,
    pub scoring: ScoringConfig,
    pub selection: SelectionConfig,
    pub trainer: TrainerConfig,
    pub evaluation: EvaluationConfig,
    pub backend: BackendConfig,
    pub max_iterations: u32,
    /// Stop once an evaluation reaches this relative score.
    pub stop_when_score: Option<f64>,
    pub run_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus_path: PathBuf::from("corpus.jsonl"),
            eval_path: PathBuf::from("eval.jsonl"),
            base_model: ModelSpec::default(),
            scorer_model: ModelSpec {
                model_name: "scorer".into(),
                ..ModelSpec::default()
            },
            baseline_model: None,
            baseline_bleu: None,
            prompts: PromptConfig::default(),
            generation: GenerationSettings::default(),
            scoring: ScoringConfig::default(),
            selection: SelectionConfig::default(),
            trainer: TrainerConfig::default(),
            evaluation: EvaluationConfig::default(),
            backend: BackendConfig::default(),
            max_iterations: 8,
            stop_when_score: None,
            run_seed: 0,
        }
    }
}

impl RunConfig {
    /// Reads a config file, applies dotted `key=value` overrides, and resolves
    /// relative paths against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut value: Value =
            serde_json::from_str(&raw).map_err(|e| ConfigError::Parse(e.to_string()))?;
        apply_overrides(&mut value, overrides)?;
        let mut config: RunConfig =
            serde_json::from_value(value).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let dir = std::path::absolute(dir).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        config.resolve_relative_to(&dir);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_relative_to(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.corpus_path);
        fix(&mut self.eval_path);
        if let Some(p) = self.prompts.question_template.as_mut() {
            fix(p);
        }
        if let Some(p) = self.prompts.answer_template.as_mut() {
            fix(p);
        }
        if let Some(program) = self.trainer.adapter_command.first_mut() {
            let as_path = Path::new(program.as_str());
            if as_path.is_relative() && as_path.components().count() > 1 {
                *program = dir.join(as_path).display().to_string();
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.max_iterations == 0 {
            return invalid("max_iterations must be >= 1");
        }
        if self.baseline_bleu.is_none() && self.baseline_model.is_none() {
            return invalid("set baseline_bleu or baseline_model");
        }
        if let Some(b) = self.baseline_bleu {
            if !(b > 0.0 && b <= 1.0) {
                return invalid("baseline_bleu must be in (0, 1]");
            }
        }
        if self.trainer.adapter_command.is_empty() {
            return invalid("trainer.adapter_command is empty");
        }
        if self.evaluation.bleu.max_ngram == 0 {
            return invalid("evaluation.bleu.max_ngram must be >= 1");
        }
        if self.backend.max_parallel == 0 {
            return invalid("backend.max_parallel must be >= 1");
        }
        self.generation
            .params
            .validate()
            .and_then(|()| self.evaluation.params.validate())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.scoring
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Map-valued keys that accept new entries through overrides.
const OPEN_MAPS: &[&str] = &["trainer.extra"];

/// Applies `a.b.c=value` overrides. Values parse as JSON when they can and
/// fall back to plain strings. Keys must already exist in the fully
/// defaulted config, except under [`OPEN_MAPS`].
pub fn apply_overrides(value: &mut Value, overrides: &[String]) -> Result<(), ConfigError> {
    if overrides.is_empty() {
        return Ok(());
    }
    // Fill in defaults so every known key is present.
    let defaulted: RunConfig = serde_json::from_value(value.clone())
        .map_err(|e| ConfigError::Parse(e.to_string()))?;
    *value = serde_json::to_value(&defaulted).expect("config serializes");

    for entry in overrides {
        let (key, raw) = entry
            .split_once('=')
            .ok_or_else(|| ConfigError::OverrideSyntax(entry.clone()))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
        let parts: Vec<&str> = key.split('.').collect();
        let (last, parents) = parts.split_last().expect("split yields one part");
        let mut cursor = &mut *value;
        for part in parents {
            cursor = cursor
                .get_mut(*part)
                .filter(|v| v.is_object())
                .ok_or_else(|| ConfigError::UnknownKey(key.to_owned()))?;
        }
        let parent_path = parents.join(".");
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| ConfigError::UnknownKey(key.to_owned()))?;
        if !obj.contains_key(*last) && !OPEN_MAPS.contains(&parent_path.as_str()) {
            return Err(ConfigError::UnknownKey(key.to_owned()));
        }
        obj.insert((*last).to_owned(), parsed);
    }
    Ok(())
}
