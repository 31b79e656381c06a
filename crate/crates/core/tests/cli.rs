//! Exercises the installed binary end to end: exit codes, stdout summaries,
//! the machine-readable error line on stderr, and artifact placement.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_normlens");

fn testdata(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata").join(name)
}

/// Writes a config file into `dir` pointing at the curated dataset, with all
/// artifacts kept inside `dir`.
fn write_config(dir: &Path) -> PathBuf {
    let config = serde_json::json!({
        "schema_version": 1,
        "seed": 7,
        "dataset": {
            "path": testdata("table1_norms.jsonl"),
            "format": "canonical_json_lines"
        },
        "backends": [
            { "kind": "scripted", "id": "scripted-model", "style": "responder" },
            { "kind": "scripted", "id": "scripted-judge", "style": "judge" }
        ],
        "models_under_test": [
            { "backend": "scripted-model", "model_id": "demo-model" }
        ],
        "judge": { "backend": "scripted-judge", "model_id": "demo-judge" },
        "generation": { "mode": "template" },
        "surfacing_scope": "same_country",
        "parallelism": 4,
        "output_dir": dir.join("runs")
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn stderr_error_record(output: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&output.stderr);
    let line = stderr
        .lines()
        .rev()
        .find(|l| l.trim_start().starts_with('{'))
        .unwrap_or_else(|| panic!("no JSON error line on stderr:\n{stderr}"));
    serde_json::from_str(line).unwrap()
}

#[test]
fn run_command_completes_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let output = run(&["run", "--config", config.to_str().unwrap(), "--run-id", "demo"]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("prompts=160"), "stdout: {stdout}");
    assert!(stdout.contains("verdicts=320"), "stdout: {stdout}");

    let run_dir = dir.path().join("runs/demo");
    for artifact in [
        "manifest.json",
        "norms.jsonl",
        "prompts.jsonl",
        "responses.jsonl",
        "surfacing.jsonl",
        "verdicts.jsonl",
        "table2.csv",
        "table2.md",
        "coverage.json",
    ] {
        assert!(run_dir.join(artifact).is_file(), "missing {artifact}");
    }
}

#[test]
fn staged_commands_chain_into_one_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let cfg = config.to_str().unwrap();

    let out = run(&["genprompts", "--config", cfg, "--run-id", "staged"]);
    assert!(out.status.success());
    let run_dir = dir.path().join("runs/staged");
    assert!(run_dir.join("prompts.jsonl").is_file());
    assert!(!run_dir.join("responses.jsonl").exists());

    let out = run(&["respond", "--config", cfg, "--run-id", "staged"]);
    assert!(out.status.success());
    assert!(run_dir.join("responses.jsonl").is_file());
    assert!(!run_dir.join("verdicts.jsonl").exists());

    let out = run(&["judge", "--config", cfg, "--run-id", "staged"]);
    assert!(out.status.success());
    assert!(run_dir.join("verdicts.jsonl").is_file());

    let out = run(&["report", "--config", cfg, "--run-id", "staged"]);
    assert!(out.status.success());
    assert!(run_dir.join("table2.csv").is_file());
}

#[test]
fn resume_of_finished_run_is_a_quiet_noop() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let cfg = config.to_str().unwrap();
    assert!(run(&["run", "--config", cfg, "--run-id", "done"]).status.success());

    let out = run(&["resume", "--config", cfg, "--run-id", "done"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("verdicts=320"), "stdout: {stdout}");
}

#[test]
fn missing_run_id_exits_one_with_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = run(&[
        "report",
        "--config",
        config.to_str().unwrap(),
        "--run-id",
        "no-such-run",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let record = stderr_error_record(&out);
    assert_eq!(record["event"], "error");
    assert!(record["kind"].is_string());
    assert!(record["message"].as_str().unwrap().contains("no-such-run"));
}

#[test]
fn config_problems_exit_two() {
    let out = run(&["run"]);
    assert_eq!(out.status.code(), Some(2));
    let record = stderr_error_record(&out);
    assert_eq!(record["event"], "error");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let out = run(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_exits_two() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn conflicting_record_and_replay_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = run(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--record",
        "a.json",
        "--replay",
        "b.json",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn set_override_changes_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = run(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--run-id",
        "hai-only",
        "--set",
        "generation.matrix.country_variants=[true]",
    ]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("prompts=80"), "stdout: {stdout}");
}

#[test]
fn annotate_writes_labeled_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let output_path = dir.path().join("annotated.jsonl");
    let out = run(&[
        "annotate",
        "--config",
        config.to_str().unwrap(),
        "--output",
        output_path.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let body = std::fs::read_to_string(&output_path).unwrap();
    assert_eq!(body.lines().count(), 4);
    for line in body.lines() {
        let norm: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(norm["labels"].is_object(), "unlabeled: {line}");
    }
}
