//! Stand-in trainer adapter for desk-scale runs.
//!
//! Honors the adapter CLI contract without touching any model: it validates
//! its inputs, derives a deterministic child model name from the parent and
//! the training data, and writes `result.json` plus an `adapter_config.json`
//! echoing the LoRA settings. The child is served by the mock backend.
//!
//! Setting `extra.mock_fail` in the trainer config makes it print that value
//! to stderr and exit 1.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use evolve_core::jsonl::sha256_hex;
use evolve_core::trainer::{read_training_set, TrainerConfig, RESULT_FILE};
use serde_json::json;

struct Args {
    base: String,
    data: PathBuf,
    out: PathBuf,
    config: PathBuf,
}

fn parse_args() -> Result<Args, String> {
    let mut base = None;
    let mut data = None;
    let mut out = None;
    let mut config = None;
    let mut it = std::env::args().skip(1);
    while let Some(flag) = it.next() {
        let value = it.next().ok_or_else(|| format!("{flag} needs a value"))?;
        match flag.as_str() {
            "--base" => base = Some(value),
            "--data" => data = Some(PathBuf::from(value)),
            "--out" => out = Some(PathBuf::from(value)),
            "--config" => config = Some(PathBuf::from(value)),
            other => return Err(format!("unknown flag {other}")),
        }
    }
    Ok(Args {
        base: base.ok_or("missing --base")?,
        data: data.ok_or("missing --data")?,
        out: out.ok_or("missing --out")?,
        config: config.ok_or("missing --config")?,
    })
}

/// Parent (backend_url, model_name): from a previous adapter output dir, or a bare model name.
fn parent_ref(base: &str, config: &TrainerConfig) -> Result<(String, String), String> {
    let result = Path::new(base).join(RESULT_FILE);
    if result.is_file() {
        let raw = fs::read_to_string(&result).map_err(|e| e.to_string())?;
        let value: serde_json::Value = serde_json::from_str(&raw).map_err(|e| e.to_string())?;
        let field = |name: &str| {
            value["model_ref"][name]
                .as_str()
                .map(str::to_owned)
                .ok_or_else(|| format!("{}: model_ref.{name} missing", result.display()))
        };
        return Ok((field("backend_url")?, field("model_name")?));
    }
    let url = config
        .extra
        .get("backend_url")
        .cloned()
        .unwrap_or_else(|| "mock://".into());
    Ok((url, base.to_owned()))
}

/// `root@<generation>-<data hash>`; the generation counts fine-tuning steps from the root.
fn child_name(parent: &str, data_digest: &str) -> String {
    let (root, generation) = match parent.rsplit_once('@') {
        Some((root, tail)) => {
            let generation = tail
                .split('-')
                .next()
                .and_then(|g| g.parse::<u32>().ok())
                .unwrap_or(0);
            (root, generation)
        }
        None => (parent, 0),
    };
    format!("{root}@{}-{}", generation + 1, &data_digest[..12])
}

fn run() -> Result<(), String> {
    let args = parse_args()?;
    let raw = fs::read_to_string(&args.config)
        .map_err(|e| format!("{}: {e}", args.config.display()))?;
    let config: TrainerConfig =
        serde_json::from_str(&raw).map_err(|e| format!("{}: {e}", args.config.display()))?;
    if let Some(message) = config.extra.get("mock_fail") {
        return Err(message.clone());
    }
    let samples = read_training_set(&args.data).map_err(|e| e.to_string())?;
    let data_bytes = fs::read(&args.data).map_err(|e| e.to_string())?;
    let (backend_url, parent_name) = parent_ref(&args.base, &config)?;
    let model_name = child_name(&parent_name, &sha256_hex(&data_bytes));

    fs::create_dir_all(&args.out).map_err(|e| e.to_string())?;
    let adapter_config = json!({
        "base_model": parent_name,
        "r": config.lora_rank,
        "lora_alpha": config.lora_alpha,
        "target_modules": config.lora_target,
        "epochs": config.epochs,
        "learning_rate": config.learning_rate,
        "samples": samples.len(),
    });
    let result = json!({
        "model_ref": { "backend_url": backend_url, "model_name": model_name }
    });
    for (name, value) in [("adapter_config.json", adapter_config), (RESULT_FILE, result)] {
        let path = args.out.join(name);
        fs::write(&path, serde_json::to_string_pretty(&value).expect("json"))
            .map_err(|e| format!("{}: {e}", path.display()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("{message}");
            ExitCode::FAILURE
        }
    }
}
