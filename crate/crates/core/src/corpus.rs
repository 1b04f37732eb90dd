//! Domain document corpus and held-out evaluation set.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::jsonl::{self, JsonlError};

/// Character budget applied to a document before it is placed in a prompt.
pub const DEFAULT_CHAR_BUDGET: usize = 8000;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("{path}:{line}: duplicate id {id:?}")]
    DuplicateId { path: String, line: usize, id: String },
    #[error("{path}:{line}: field `{field}` is empty")]
    EmptyField {
        path: String,
        line: usize,
        field: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeDocument {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl KnowledgeDocument {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            metadata: BTreeMap::new(),
        }
    }

    /// The document text cut to at most `budget` characters, and whether a cut happened.
    pub fn text_within(&self, budget: usize) -> (Cow<'_, str>, bool) {
        match self.text.char_indices().nth(budget) {
            Some((byte_idx, _)) => (Cow::Borrowed(&self.text[..byte_idx]), true),
            None => (Cow::Borrowed(&self.text), false),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub id: String,
    pub question: String,
    pub reference_answer: String,
}

fn check_unique(
    path: &Path,
    seen: &mut HashMap<String, usize>,
    id: &str,
    line: usize,
) -> Result<(), CorpusError> {
    if seen.insert(id.to_owned(), line).is_some() {
        return Err(CorpusError::DuplicateId {
            path: path.display().to_string(),
            line,
            id: id.to_owned(),
        });
    }
    Ok(())
}

fn check_non_empty(
    path: &Path,
    line: usize,
    field: &'static str,
    value: &str,
) -> Result<(), CorpusError> {
    if value.trim().is_empty() {
        return Err(CorpusError::EmptyField {
            path: path.display().to_string(),
            line,
            field,
        });
    }
    Ok(())
}

/// Loads a JSONL corpus in file order.
pub fn load_documents(path: &Path) -> Result<Vec<KnowledgeDocument>, CorpusError> {
    let mut seen = HashMap::new();
    jsonl::read::<KnowledgeDocument>(path)?
        .into_iter()
        .map(|rec| {
            check_non_empty(path, rec.line, "id", &rec.value.id)?;
            check_non_empty(path, rec.line, "text", &rec.value.text)?;
            check_unique(path, &mut seen, &rec.value.id, rec.line)?;
            Ok(rec.value)
        })
        .collect()
}

/// Loads the held-out QA set in file order. An empty file is an empty set.
pub fn load_eval_set(path: &Path) -> Result<Vec<EvalPair>, CorpusError> {
    let mut seen = HashMap::new();
    jsonl::read::<EvalPair>(path)?
        .into_iter()
        .map(|rec| {
            check_non_empty(path, rec.line, "id", &rec.value.id)?;
            check_non_empty(path, rec.line, "question", &rec.value.question)?;
            check_non_empty(path, rec.line, "reference_answer", &rec.value.reference_answer)?;
            check_unique(path, &mut seen, &rec.value.id, rec.line)?;
            Ok(rec.value)
        })
        .collect()
}

pub fn write_documents(path: &Path, docs: &[KnowledgeDocument]) -> Result<String, CorpusError> {
    Ok(jsonl::write(path, docs)?)
}

pub fn write_eval_set(path: &Path, pairs: &[EvalPair]) -> Result<String, CorpusError> {
    Ok(jsonl::write(path, pairs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), contents).unwrap();
        f
    }

    #[test]
    fn preserves_file_order() {
        let f = write_tmp(
            r#"{"id":"c","text":"third in id order"}
{"id":"a","text":"alpha","metadata":{"source":"wiki"}}

{"id":"b","text":"beta"}
"#,
        );
        let docs = load_documents(f.path()).unwrap();
        let ids: Vec<_> = docs.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
        assert_eq!(docs[1].metadata["source"], "wiki");
    }

    #[test]
    fn duplicate_id_names_id_and_line() {
        let f = write_tmp(
            "{\"id\":\"d0\",\"text\":\"x\"}\n{\"id\":\"d1\",\"text\":\"x\"}\n{\"id\":\"d2\",\"text\":\"x\"}\n{\"id\":\"d3\",\"text\":\"x\"}\n{\"id\":\"d1\",\"text\":\"y\"}\n",
        );
        let err = load_documents(f.path()).unwrap_err();
        match &err {
            CorpusError::DuplicateId { line, id, .. } => {
                assert_eq!(id, "d1");
                assert_eq!(*line, 5);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("\"d1\""));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_tmp("{\"id\":\"a\",\"text\":\"x\"}\n{not json\n");
        let err = load_documents(f.path()).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn whitespace_only_text_rejected() {
        let f = write_tmp("{\"id\":\"a\",\"text\":\"  \\n \"}\n");
        assert!(matches!(
            load_documents(f.path()),
            Err(CorpusError::EmptyField { field: "text", .. })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_documents(Path::new("/nonexistent/corpus.jsonl")).unwrap_err();
        assert!(matches!(err, CorpusError::Jsonl(JsonlError::Io { .. })));
    }

    #[test]
    fn four_thousand_documents() {
        let body: String = (0..4000)
            .map(|i| format!("{{\"id\":\"doc-{i}\",\"text\":\"Alarm {i} explanation\"}}\n"))
            .collect();
        let f = write_tmp(&body);
        assert_eq!(load_documents(f.path()).unwrap().len(), 4000);
    }

    #[test]
    fn eval_set_cases() {
        let body: String = (0..100)
            .map(|i| format!("{{\"id\":\"q{i}\",\"question\":\"Q{i}?\",\"reference_answer\":\"A{i}\"}}\n"))
            .collect();
        assert_eq!(load_eval_set(write_tmp(&body).path()).unwrap().len(), 100);
        assert!(load_eval_set(write_tmp("").path()).unwrap().is_empty());

        let err = load_eval_set(write_tmp("{\"id\":\"q\",\"question\":\"Q?\"}\n").path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":1:") && msg.contains("reference_answer"), "{msg}");

        let err = load_eval_set(
            write_tmp("{\"id\":\"q\",\"question\":\"Q?\",\"reference_answer\":\"\"}\n").path(),
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::EmptyField { field: "reference_answer", .. }));
    }

    #[test]
    fn budget_truncation_counts_chars() {
        let doc = KnowledgeDocument::new("d", "告警".repeat(3));
        assert_eq!(doc.text_within(4), (Cow::Borrowed("告警告警"), true));
        assert!(!doc.text_within(6).1);
    }

    #[test]
    fn load_is_repeatable() {
        let f = write_tmp("{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"b\",\"text\":\"y\"}\n");
        assert_eq!(load_documents(f.path()).unwrap(), load_documents(f.path()).unwrap());
    }
}
