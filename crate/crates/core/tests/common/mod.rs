#![allow(dead_code)]

use std::path::{Path, PathBuf};

use evolve_core::config::{ModelSpec, RunConfig};
use evolve_core::corpus::{write_documents, write_eval_set};
use evolve_core::selection::Strategy;
use evolve_core::{EvalPair, KnowledgeDocument};

const TOPICS: [&str; 8] = [
    "Fan failure alarms on rack 3 clear after the fan tray is reseated and the controller is restarted.",
    "Disk latency above 40 ms on the storage array usually means a rebuild is running in the background.",
    "When the BGP session flaps, check the hold timer and the MTU on both ends of the link.",
    "Certificate expiry warnings appear 30 days ahead; renew through the internal CA portal.",
    "High CPU on the log collector is caused by an unbounded regex in the parsing rules.",
    "A power supply alarm that clears within a minute is recorded but needs no replacement.",
    "Backup jobs fail with code 17 when the tape library is offline for maintenance.",
    "Packet loss on the uplink drops once the optical module is cleaned and reinserted.",
];

pub fn documents(n: usize) -> Vec<KnowledgeDocument> {
    (0..n)
        .map(|i| KnowledgeDocument::new(format!("doc-{i:03}"), TOPICS[i % TOPICS.len()]))
        .collect()
}

pub fn eval_pairs(n: usize) -> Vec<EvalPair> {
    (0..n)
        .map(|i| EvalPair {
            id: format!("q{i}"),
            question: format!("How do I handle alarm {i} on the service?"),
            reference_answer: "Check the alarm log, verify the configuration and restart the service."
                .into(),
        })
        .collect()
}

pub fn mock_trainer() -> String {
    env!("CARGO_BIN_EXE_evolve-mock-trainer").to_owned()
}

/// Writes corpus and eval files under `dir` and returns a config over mock backends.
pub fn mock_config(dir: &Path, docs: usize, iterations: u32, k: Option<usize>) -> RunConfig {
    let corpus_path = dir.join("corpus.jsonl");
    let eval_path = dir.join("eval.jsonl");
    write_documents(&corpus_path, &documents(docs)).unwrap();
    write_eval_set(&eval_path, &eval_pairs(4)).unwrap();
    let mut config = RunConfig {
        corpus_path,
        eval_path,
        baseline_model: Some(ModelSpec {
            backend_url: "mock://".into(),
            model_name: "benchmark".into(),
        }),
        max_iterations: iterations,
        run_seed: 7,
        ..RunConfig::default()
    };
    config.selection.k = k;
    config.selection.strategy = Strategy::IfdTopk;
    config.trainer.adapter_command = vec![mock_trainer()];
    config
}

pub fn run_dir(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}
