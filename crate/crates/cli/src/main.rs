//! `evolve`: run the self-evolution loop or any single phase of it.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evolve_core::config::{ConfigError, RunConfig};
use evolve_core::evaluation::write_curve_csv;
use evolve_core::pipeline::{self, Phase, Pipeline, PipelineError, RunManifest, MANIFEST_FILE};
use serde_json::json;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "evolve", version, about = "Iterative self-evolution fine-tuning")]
struct Cli {
    /// Print machine-readable JSON results on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run config (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Dotted override, e.g. `selection.k=2000`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct OptionalConfig {
    /// Config expected to match the run's recorded config.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE", requires = "config")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunDir {
    /// Run directory holding the manifest and artifacts.
    #[arg(long = "run", short = 'r', value_name = "DIR")]
    dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Validate inputs and create a run directory.
    Ingest {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        run: RunDir,
    },
    /// Generate the next iteration's QA dataset.
    Generate(PhaseArgs),
    /// Score the latest dataset by IFD.
    Score(PhaseArgs),
    /// Select historical pairs for the next training set.
    Select(PhaseArgs),
    /// Fine-tune the next model generation.
    Train(PhaseArgs),
    /// Evaluate the newest model (or measure the baseline first).
    Evaluate(PhaseArgs),
    /// Create a run and execute every phase.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        run: RunDir,
    },
    /// Continue a run from its first incomplete phase.
    Resume(PhaseArgs),
    /// Show the evaluation curve of a run.
    Report {
        #[command(flatten)]
        run: RunDir,
        /// Also write the curve as CSV.
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PhaseArgs {
    #[command(flatten)]
    run: RunDir,
    #[command(flatten)]
    config: OptionalConfig,
}

#[derive(Debug)]
enum CliError {
    Config(ConfigError),
    Pipeline(PipelineError),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Pipeline(e) if e.is_validation() => 1,
            _ => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => e.fmt(f),
            CliError::Pipeline(e) => e.fmt(f),
            CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Pipeline(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let default_level = if cli.quiet { "warn" } else { "info" };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default_level)),
        )
        .init();

    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Ingest { config, run } => {
            let config = RunConfig::load(&config.config, &config.overrides)?;
            let pipeline = Pipeline::create(&run.dir, config, None)?;
            let m = pipeline.manifest();
            emit(
                cli.json,
                json!({
                    "manifest": pipeline.manifest_path(),
                    "corpus_sha256": m.corpus.sha256,
                    "eval_set_sha256": m.eval_set.sha256,
                    "next_phase": pipeline.next_phase(),
                }),
                &pipeline.manifest_path().display().to_string(),
            );
            Ok(())
        }
        Command::Generate(args) => single_phase(cli, args, Phase::Generate),
        Command::Score(args) => single_phase(cli, args, Phase::Score),
        Command::Select(args) => single_phase(cli, args, Phase::Select),
        Command::Train(args) => single_phase(cli, args, Phase::Train),
        Command::Evaluate(args) => single_phase(cli, args, Phase::Evaluate),
        Command::Run { config, run } => {
            let config = RunConfig::load(&config.config, &config.overrides)?;
            let manifest = pipeline::run(&run.dir, config, None)?;
            finished(cli, &run.dir, &manifest);
            Ok(())
        }
        Command::Resume(args) => {
            let expected = args.config.load()?;
            let manifest = pipeline::resume(&args.run.dir, expected.as_ref(), None)?;
            finished(cli, &pipeline::run_dir_of(&args.run.dir), &manifest);
            Ok(())
        }
        Command::Report { run, csv } => report(cli, &run.dir, csv.as_deref()),
    }
}

impl OptionalConfig {
    fn load(&self) -> Result<Option<RunConfig>, CliError> {
        self.config
            .as_ref()
            .map(|path| RunConfig::load(path, &self.overrides))
            .transpose()
            .map_err(CliError::from)
    }
}

fn single_phase(cli: &Cli, args: &PhaseArgs, phase: Phase) -> Result<(), CliError> {
    let expected = args.config.load()?;
    let mut pipeline = Pipeline::open(&args.run.dir, expected.as_ref(), None)?;
    let done = pipeline.step_expecting(phase)?;
    let next = pipeline.next_phase();
    emit(
        cli.json,
        json!({
            "completed": done,
            "next_phase": next,
            "status": pipeline.manifest().status,
            "manifest": pipeline.manifest_path(),
        }),
        &match next {
            Some(next) => format!("{done} done; next: {next}"),
            None => format!("{done} done; run complete"),
        },
    );
    Ok(())
}

fn finished(cli: &Cli, run_dir: &Path, manifest: &RunManifest) {
    let path = run_dir.join(MANIFEST_FILE);
    emit(
        cli.json,
        json!({
            "manifest": path,
            "status": manifest.status,
            "stop_reason": manifest.stop_reason,
            "curve": curve_json(manifest),
        }),
        &path.display().to_string(),
    );
}

fn report(cli: &Cli, path: &Path, csv: Option<&Path>) -> Result<(), CliError> {
    let run_dir = pipeline::run_dir_of(path);
    let manifest = RunManifest::load(&run_dir.join(MANIFEST_FILE))?;
    if let Some(csv) = csv {
        let reports = pipeline::load_reports(&run_dir, &manifest)?;
        write_curve_csv(csv, &reports).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    if cli.json {
        println!("{}", serde_json::Value::Array(curve_json(&manifest)));
        return Ok(());
    }
    println!("status: {:?}", manifest.status);
    if let Some(b) = &manifest.baseline {
        println!("baseline BLEU: {:.4}", b.bleu);
    }
    println!("{:>9}  {:>10}  {:>9}", "iteration", "BLEU", "score");
    for (i, bleu, score) in manifest.curve() {
        println!("{i:>9}  {bleu:>10.4}  {score:>9.4}");
    }
    if let Some(f) = &manifest.failure {
        println!("failed at {:?} {}: {}", f.iteration, f.phase, f.message);
    }
    Ok(())
}

fn curve_json(manifest: &RunManifest) -> Vec<serde_json::Value> {
    manifest
        .curve()
        .into_iter()
        .map(|(iteration, model_bleu, relative_score)| {
            json!({
                "iteration": iteration,
                "model_bleu": model_bleu,
                "relative_score": relative_score,
            })
        })
        .collect()
}

fn emit(as_json: bool, value: serde_json::Value, human: &str) {
    if as_json {
        println!("{value}");
    } else {
        println!("{human}");
    }
}
