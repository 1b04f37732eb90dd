//! On-disk run state. Every completed phase appends a record; nothing is rewritten.

use std::fmt;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::ModelRef;
use crate::config::RunConfig;
use crate::generation::GenerationStats;
use crate::scoring::Exclusion;
use crate::selection::SelectionResult;
use crate::trainer::ModelLineage;

use super::PipelineError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

/// Keys ending in this suffix hold wall-clock times and are ignored by
/// [`RunManifest::comparable`].
pub const TIMESTAMP_SUFFIX: &str = "_at_ms";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Baseline,
    Generate,
    Score,
    Select,
    Train,
    Evaluate,
}

impl Phase {
    pub const ITERATION: [Phase; 5] = [
        Phase::Generate,
        Phase::Score,
        Phase::Select,
        Phase::Train,
        Phase::Evaluate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Baseline => "baseline",
            Phase::Generate => "generate",
            Phase::Score => "score",
            Phase::Select => "select",
            Phase::Train => "train",
            Phase::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A phase scheduled for a specific iteration (`None` for the baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseId {
    pub iteration: Option<u32>,
    pub phase: Phase,
}

impl fmt::Display for PhaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.iteration {
            Some(i) => write!(f, "iteration {i} {}", self.phase),
            None => write!(f, "{}", self.phase),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

/// A file under the run directory (or an absolute input path) and its sha256.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateRecord {
    pub source: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Templates {
    pub question: TemplateRecord,
    pub answer: TemplateRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub iteration: Option<u32>,
    pub phase: Phase,
    pub message: String,
}

/// Ordering and wall-clock time of a completed phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Marker {
    pub seq: u64,
    pub completed_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub marker: Marker,
    pub bleu: f64,
    /// Model name, or `None` when the value came from the config.
    pub model: Option<String>,
    pub report: Option<ArtifactRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRecord {
    pub marker: Marker,
    pub generator: ModelRef,
    pub dataset: ArtifactRef,
    pub pairs: usize,
    pub stats: GenerationStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecordSet {
    pub marker: Marker,
    pub scorer: ModelRef,
    pub scores: ArtifactRef,
    pub scored: usize,
    pub exclusions: Vec<Exclusion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectRecord {
    pub marker: Marker,
    pub result: SelectionResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub marker: Marker,
    pub training_set: ArtifactRef,
    pub training_size: usize,
    /// Index into [`RunManifest::lineage`] of the model this phase produced.
    pub produced: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateRecord {
    pub marker: Marker,
    pub model: String,
    pub report: ArtifactRef,
    pub model_bleu: f64,
    pub relative_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub generate: Option<GenerateRecord>,
    pub score: Option<ScoreRecordSet>,
    pub select: Option<SelectRecord>,
    pub train: Option<TrainRecord>,
    pub evaluate: Option<EvaluateRecord>,
}

impl IterationRecord {
    pub fn new(iteration: u32) -> Self {
        Self {
            iteration,
            generate: None,
            score: None,
            select: None,
            train: None,
            evaluate: None,
        }
    }

    pub fn marker(&self, phase: Phase) -> Option<&Marker> {
        match phase {
            Phase::Baseline => None,
            Phase::Generate => self.generate.as_ref().map(|r| &r.marker),
            Phase::Score => self.score.as_ref().map(|r| &r.marker),
            Phase::Select => self.select.as_ref().map(|r| &r.marker),
            Phase::Train => self.train.as_ref().map(|r| &r.marker),
            Phase::Evaluate => self.evaluate.as_ref().map(|r| &r.marker),
        }
    }

    /// First phase without a marker, or `None` once evaluation is recorded.
    pub fn next_phase(&self) -> Option<Phase> {
        Phase::ITERATION
            .into_iter()
            .find(|p| self.marker(*p).is_none())
    }

    /// A later marker must imply every earlier one.
    pub fn markers_monotone(&self) -> bool {
        let present: Vec<bool> = Phase::ITERATION
            .iter()
            .map(|p| self.marker(*p).is_some())
            .collect();
        present.windows(2).all(|w| w[0] || !w[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    pub templates: Templates,
    pub corpus: ArtifactRef,
    pub eval_set: ArtifactRef,
    /// Settings in effect that fall back to defaults the method leaves open.
    pub defaults_in_effect: Vec<String>,
    pub status: RunStatus,
    pub failure: Option<Failure>,
    pub stop_reason: Option<String>,
    pub baseline: Option<BaselineRecord>,
    pub lineage: Vec<ModelLineage>,
    pub iterations: Vec<IterationRecord>,
    pub next_seq: u64,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let raw = fs::read_to_string(path).map_err(PipelineError::io(path))?;
        let manifest: RunManifest = serde_json::from_str(&raw)
            .map_err(|e| PipelineError::Manifest(format!("{}: {e}", path.display())))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(PipelineError::Manifest(format!(
                "unsupported format_version {}",
                manifest.format_version
            )));
        }
        Ok(manifest)
    }

    /// Writes through a temp file and rename so readers never see a partial manifest.
    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let tmp = path.with_extension("json.tmp");
        let mut body = serde_json::to_vec_pretty(self).expect("manifest serializes");
        body.push(b'\n');
        fs::write(&tmp, body).map_err(PipelineError::io(&tmp))?;
        fs::rename(&tmp, path).map_err(PipelineError::io(path))
    }

    pub(crate) fn next_marker(&mut self) -> Marker {
        let seq = self.next_seq;
        self.next_seq += 1;
        Marker {
            seq,
            completed_at_ms: now_ms(),
        }
    }

    pub fn iteration(&self, i: u32) -> Option<&IterationRecord> {
        self.iterations.iter().find(|r| r.iteration == i)
    }

    pub(crate) fn iteration_mut(&mut self, i: u32) -> &mut IterationRecord {
        if let Some(pos) = self.iterations.iter().position(|r| r.iteration == i) {
            return &mut self.iterations[pos];
        }
        self.iterations.push(IterationRecord::new(i));
        self.iterations.last_mut().expect("just pushed")
    }

    /// Evaluation results in iteration order: `(iteration, model_bleu, relative_score)`.
    pub fn curve(&self) -> Vec<(u32, f64, f64)> {
        self.iterations
            .iter()
            .filter_map(|r| {
                r.evaluate
                    .as_ref()
                    .map(|e| (r.iteration, e.model_bleu, e.relative_score))
            })
            .collect()
    }

    /// The manifest as JSON with every wall-clock field removed.
    pub fn comparable(&self) -> Value {
        let mut value = serde_json::to_value(self).expect("manifest serializes");
        strip_timestamps(&mut value);
        value
    }
}

pub fn strip_timestamps(value: &mut Value) {
    match value {
        Value::Object(map) => {
            map.retain(|k, _| !k.ends_with(TIMESTAMP_SUFFIX));
            map.values_mut().for_each(strip_timestamps);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_timestamps),
        _ => {}
    }
}

pub(crate) fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
