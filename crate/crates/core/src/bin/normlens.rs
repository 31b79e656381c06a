//! Command-line entry point: one subcommand per pipeline stage plus
//! end-to-end run, resume, report, and dataset annotation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use normlens::error::ConfigError;
use normlens::ingest::{load_norms, write_norms};
use normlens::runner::{
    load_config, resume_until, run_pipeline_until, BackendRegistry, ExecutionMode, RunConfig,
    build_registry, emit_reports,
};
use normlens::store::{RunManifest, RunStore, Stage, MANIFEST_FILE};
use normlens::taxonomy::{annotate_norm, AnnotationRubric};
use normlens::Error;

#[derive(Parser)]
#[command(
    name = "normlens",
    version,
    about = "Batch evaluation of model adherence to sociocultural norms"
)]
struct Cli {
    /// Run-config file (JSON).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Run id to create or act on.
    #[arg(long, global = true, value_name = "ID")]
    run_id: Option<String>,

    /// Override a config key by dotted path, e.g. --set seed=9 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Answer every backend call from a recorded archive.
    #[arg(long, global = true, value_name = "ARCHIVE")]
    replay: Option<PathBuf>,

    /// Record every backend call into an archive.
    #[arg(long, global = true, value_name = "ARCHIVE")]
    record: Option<PathBuf>,

    /// Output directory (overrides the config value).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Emit line-delimited JSON event records on the diagnostic stream.
    #[arg(long, global = true)]
    log_json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Label norms with the judge model and write canonical JSONL.
    Annotate {
        /// Dataset to annotate; defaults to the config's dataset.
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        /// Where to write the annotated canonical JSONL.
        #[arg(long, value_name = "FILE")]
        output: PathBuf,
        /// Re-annotate norms that already carry labels.
        #[arg(long)]
        overwrite: bool,
    },
    /// Generate test prompts (stage 1).
    Genprompts,
    /// Generate model responses (stage 2).
    Respond,
    /// Surface norms and detect violations (stages 3 and 4).
    Judge,
    /// Render report artifacts for an existing run.
    Report,
    /// Execute every stage end to end.
    Run,
    /// Continue an interrupted run.
    Resume,
}

struct Session {
    config_path: Option<PathBuf>,
    overrides: Vec<(String, String)>,
    run_id: Option<String>,
    out: Option<PathBuf>,
    mode: ExecutionMode,
    log_json: bool,
}

impl Session {
    fn from_cli(cli: &Cli) -> Result<Session, Error> {
        let mut overrides = Vec::new();
        for item in &cli.set {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| ConfigError::BadOverride(item.clone()))?;
            overrides.push((key.to_string(), value.to_string()));
        }
        let mode = match (&cli.replay, &cli.record) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid(
                    "--replay and --record are mutually exclusive".to_string(),
                )
                .into())
            }
            (Some(path), None) => ExecutionMode::Replay(path.clone()),
            (None, Some(path)) => ExecutionMode::Record(path.clone()),
            (None, None) => ExecutionMode::Live,
        };
        Ok(Session {
            config_path: cli.config.clone(),
            overrides,
            run_id: cli.run_id.clone(),
            out: cli.out.clone(),
            mode,
            log_json: cli.log_json,
        })
    }

    fn config(&self) -> Result<RunConfig, Error> {
        let path = self.config_path.as_ref().ok_or_else(|| {
            Error::from(ConfigError::Invalid(
                "this command requires --config".to_string(),
            ))
        })?;
        let mut config = load_config(path, &self.overrides)?;
        if let Some(run_id) = &self.run_id {
            config.run_id = Some(run_id.clone());
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        Ok(config)
    }

    /// Directory of the run addressed by --run-id (and --out or the config's
    /// output directory).
    fn existing_run_dir(&self) -> Result<PathBuf, Error> {
        let run_id = self.run_id.as_ref().ok_or_else(|| {
            Error::from(ConfigError::Invalid(
                "this command requires --run-id".to_string(),
            ))
        })?;
        let output_dir = match (&self.out, &self.config_path) {
            (Some(out), _) => out.clone(),
            (None, Some(_)) => self.config()?.output_dir,
            (None, None) => PathBuf::from("runs"),
        };
        Ok(RunStore::run_dir(&output_dir, run_id))
    }

    fn event(&self, event: &str, fields: serde_json::Value) {
        if !self.log_json {
            return;
        }
        let mut record = json!({ "event": event });
        if let (Some(record_map), Some(field_map)) = (record.as_object_mut(), fields.as_object())
        {
            for (k, v) in field_map {
                record_map.insert(k.clone(), v.clone());
            }
        }
        eprintln!("{record}");
    }
}

fn stage_summary(manifest: &RunManifest) -> String {
    Stage::ALL
        .iter()
        .map(|s| format!("{s}={}", manifest.stage(*s).items))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Creates the run if its directory does not exist yet, otherwise continues
/// it; either way stages beyond `until` are left untouched.
fn run_or_resume(
    session: &Session,
    config: &RunConfig,
    until: Option<Stage>,
) -> Result<RunManifest, Error> {
    if let Some(run_id) = &config.run_id {
        let run_dir = RunStore::run_dir(&config.output_dir, run_id);
        if run_dir.join(MANIFEST_FILE).is_file() {
            session.event("resume", json!({ "run_id": run_id }));
            return Ok(resume_until(&run_dir, &session.mode, until)?);
        }
    }
    session.event("run_start", json!({ "run_id": config.run_id }));
    Ok(run_pipeline_until(config, &session.mode, until)?)
}

fn cmd_stage(session: &Session, until: Option<Stage>) -> Result<(), Error> {
    let config = session.config()?;
    let manifest = run_or_resume(session, &config, until)?;
    session.event(
        "stages_done",
        json!({ "run_id": manifest.run_id, "complete": manifest.is_complete() }),
    );
    println!("run {}: {}", manifest.run_id, stage_summary(&manifest));
    if manifest.is_complete() {
        println!(
            "reports written to {}",
            RunStore::run_dir(&config.output_dir, &manifest.run_id).display()
        );
    }
    Ok(())
}

fn cmd_resume(session: &Session) -> Result<(), Error> {
    let run_dir = session.existing_run_dir()?;
    let manifest = resume_until(&run_dir, &session.mode, None)?;
    println!("run {}: {}", manifest.run_id, stage_summary(&manifest));
    Ok(())
}

fn cmd_report(session: &Session) -> Result<(), Error> {
    let run_dir = session.existing_run_dir()?;
    let store = RunStore::open(&run_dir)?;
    let manifest = store.load_manifest()?;
    let config: RunConfig = serde_json::from_value(manifest.config.clone())
        .map_err(|e| ConfigError::Parse(format!("manifest config snapshot: {e}")))?;
    emit_reports(&store, &config)?;
    println!("reports written to {}", run_dir.display());
    Ok(())
}

fn cmd_annotate(
    session: &Session,
    input: Option<&Path>,
    output: &Path,
    overwrite: bool,
) -> Result<(), Error> {
    let config = session.config()?;
    let mut descriptor = config.dataset.clone();
    if let Some(path) = input {
        descriptor.path = path.to_path_buf();
    }
    let outcome = load_norms(&descriptor)?;
    for warning in &outcome.warnings {
        session.event(
            "ingest_warning",
            json!({ "line": warning.line, "message": warning.message }),
        );
    }

    let registry: BackendRegistry = build_registry(&config, &session.mode)?;
    let judge = registry.get(&config.judge.backend)?;
    let rubric = AnnotationRubric::builtin();
    let mut annotated = Vec::with_capacity(outcome.norms.len());
    let mut failures = 0usize;
    for norm in &outcome.norms {
        match annotate_norm(norm, judge.as_ref(), &config.judge.model_id, &rubric, overwrite) {
            Ok(result) => annotated.push(result.norm),
            Err(e) => {
                failures += 1;
                session.event(
                    "annotate_failure",
                    json!({ "norm_id": norm.id, "message": e.to_string() }),
                );
                annotated.push(norm.clone());
            }
        }
    }
    let written = write_norms(&annotated, output)?;
    println!(
        "annotated {written} norms to {} ({failures} left unlabeled after errors, {} ingest warnings)",
        output.display(),
        outcome.warnings.len()
    );
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Error> {
    let session = Session::from_cli(cli)?;
    match &cli.command {
        Command::Annotate {
            input,
            output,
            overwrite,
        } => cmd_annotate(&session, input.as_deref(), output, *overwrite),
        Command::Genprompts => cmd_stage(&session, Some(Stage::Prompts)),
        Command::Respond => cmd_stage(&session, Some(Stage::Responses)),
        Command::Judge => cmd_stage(&session, Some(Stage::Verdicts)),
        Command::Run => cmd_stage(&session, None),
        Command::Resume => cmd_resume(&session),
        Command::Report => cmd_report(&session),
    }
}

fn error_kind(error: &Error) -> &'static str {
    match error {
        Error::Config(_) => "config",
        Error::Ingest(_) => "ingest",
        Error::Backend(_) => "backend",
        Error::Template(_) => "template",
        Error::Judge(_) => "judge",
        Error::Annotate(_) => "annotate",
        Error::PromptGen(_) => "promptgen",
        Error::Store(_) => "store",
        Error::Run(_) => "run",
        Error::Report(_) => "report",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!(
                "{}",
                json!({
                    "event": "error",
                    "kind": error_kind(&error),
                    "message": error.to_string(),
                })
            );
            if error.is_usage() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
