//! Append-only on-disk run store: one directory per run holding a manifest
//! plus one line-delimited JSON file per pipeline stage.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backends::ModelResponse;
use crate::error::StoreError;
use crate::judge::{SurfacingResult, ViolationVerdict};
use crate::promptgen::TestPrompt;
use crate::taxonomy::Norm;
use crate::util::string_enum;

string_enum! {
    /// Pipeline stages in execution order.
    Stage {
        Prompts => "prompts",
        Responses => "responses",
        Surfacing => "surfacing",
        Verdicts => "verdicts",
    }
}

string_enum! {
    /// Lifecycle of one stage within a run.
    StageStatus {
        Pending => "pending",
        InProgress => "in_progress",
        Complete => "complete",
    }
}

impl Stage {
    pub fn file(self) -> StoreFile {
        match self {
            Stage::Prompts => StoreFile::Prompts,
            Stage::Responses => StoreFile::Responses,
            Stage::Surfacing => StoreFile::Surfacing,
            Stage::Verdicts => StoreFile::Verdicts,
        }
    }

    fn predecessor(self) -> Option<Stage> {
        let all = Stage::ALL;
        all.iter().position(|s| *s == self).and_then(|i| {
            if i == 0 {
                None
            } else {
                Some(all[i - 1])
            }
        })
    }
}

/// Files inside a run directory that hold stage output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreFile {
    Norms,
    Prompts,
    Responses,
    Surfacing,
    Verdicts,
}

impl StoreFile {
    pub const ALL: [StoreFile; 5] = [
        StoreFile::Norms,
        StoreFile::Prompts,
        StoreFile::Responses,
        StoreFile::Surfacing,
        StoreFile::Verdicts,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            StoreFile::Norms => "norms.jsonl",
            StoreFile::Prompts => "prompts.jsonl",
            StoreFile::Responses => "responses.jsonl",
            StoreFile::Surfacing => "surfacing.jsonl",
            StoreFile::Verdicts => "verdicts.jsonl",
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Progress counters for one stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageState {
    pub status: StageStatus,
    /// Items successfully written for this stage.
    pub items: u64,
    /// Per-item failures recorded and skipped.
    pub failures: u64,
}

impl Default for StageStatus {
    fn default() -> Self {
        StageStatus::Pending
    }
}

/// Durable description of one run: config snapshot, per-stage progress, and
/// the template versions that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: Value,
    pub seed: u64,
    pub prompt_template_version: String,
    pub judge_template_version: String,
    pub stages: BTreeMap<Stage, StageState>,
    /// Set when a stage-fatal error aborted the run.
    #[serde(default)]
    pub failed_stage: Option<Stage>,
    #[serde(default)]
    pub error: Option<String>,
    pub started_at: String,
    #[serde(default)]
    pub finished_at: Option<String>,
}

impl RunManifest {
    pub fn new(
        run_id: &str,
        config: Value,
        seed: u64,
        prompt_template_version: &str,
        judge_template_version: &str,
    ) -> Self {
        let stages = Stage::ALL
            .iter()
            .map(|s| (*s, StageState::default()))
            .collect();
        RunManifest {
            run_id: run_id.to_string(),
            config,
            seed,
            prompt_template_version: prompt_template_version.to_string(),
            judge_template_version: judge_template_version.to_string(),
            stages,
            failed_stage: None,
            error: None,
            started_at: chrono::Utc::now().to_rfc3339(),
            finished_at: None,
        }
    }

    pub fn stage(&self, stage: Stage) -> &StageState {
        self.stages.get(&stage).expect("all stages present")
    }

    fn stage_mut(&mut self, stage: Stage) -> &mut StageState {
        self.stages.entry(stage).or_default()
    }

    /// Marks a stage in progress, enforcing that its predecessor is complete.
    pub fn begin_stage(&mut self, stage: Stage) -> Result<(), StoreError> {
        if let Some(prev) = stage.predecessor() {
            if self.stage(prev).status != StageStatus::Complete {
                return Err(StoreError::Corrupt(format!(
                    "stage `{stage}` cannot start while `{prev}` is {}",
                    self.stage(prev).status
                )));
            }
        }
        self.stage_mut(stage).status = StageStatus::InProgress;
        Ok(())
    }

    /// Records stage completion; counts never move backwards.
    pub fn complete_stage(
        &mut self,
        stage: Stage,
        items: u64,
        failures: u64,
    ) -> Result<(), StoreError> {
        let state = self.stage_mut(stage);
        if items < state.items {
            return Err(StoreError::Corrupt(format!(
                "stage `{stage}` item count would shrink from {} to {items}",
                state.items
            )));
        }
        state.status = StageStatus::Complete;
        state.items = items;
        state.failures = failures;
        Ok(())
    }

    pub fn record_progress(&mut self, stage: Stage, items: u64, failures: u64) {
        let state = self.stage_mut(stage);
        state.items = state.items.max(items);
        state.failures = state.failures.max(failures);
    }

    pub fn record_failure(&mut self, stage: Stage, message: &str) {
        self.failed_stage = Some(stage);
        self.error = Some(message.to_string());
        self.finished_at = Some(chrono::Utc::now().to_rfc3339());
    }

    pub fn is_complete(&self) -> bool {
        Stage::ALL
            .iter()
            .all(|s| self.stage(*s).status == StageStatus::Complete)
    }

    pub fn first_incomplete_stage(&self) -> Option<Stage> {
        Stage::ALL
            .iter()
            .copied()
            .find(|s| self.stage(*s).status != StageStatus::Complete)
    }
}

/// Handle to one run directory.
#[derive(Debug, Clone)]
pub struct RunStore {
    dir: PathBuf,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> StoreError {
    StoreError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

impl RunStore {
    pub fn run_dir(output_dir: &Path, run_id: &str) -> PathBuf {
        output_dir.join(run_id)
    }

    /// Creates a fresh run directory; refuses to clobber an existing run.
    pub fn create(output_dir: &Path, manifest: &RunManifest) -> Result<RunStore, StoreError> {
        let dir = Self::run_dir(output_dir, &manifest.run_id);
        let manifest_path = dir.join(MANIFEST_FILE);
        if manifest_path.exists() {
            return Err(StoreError::Corrupt(format!(
                "run `{}` already exists at `{}`",
                manifest.run_id,
                dir.display()
            )));
        }
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let store = RunStore { dir };
        store.save_manifest(manifest)?;
        Ok(store)
    }

    /// Opens an existing run directory.
    pub fn open(dir: &Path) -> Result<RunStore, StoreError> {
        if !dir.join(MANIFEST_FILE).is_file() {
            return Err(StoreError::MissingRun {
                dir: dir.to_path_buf(),
            });
        }
        Ok(RunStore {
            dir: dir.to_path_buf(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn file_path(&self, file: StoreFile) -> PathBuf {
        self.dir.join(file.file_name())
    }

    pub fn load_manifest(&self) -> Result<RunManifest, StoreError> {
        let path = self.dir.join(MANIFEST_FILE);
        let raw = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        serde_json::from_str(&raw).map_err(|e| StoreError::MalformedRecord {
            path,
            line: 1,
            message: e.to_string(),
        })
    }

    /// Atomically replaces the manifest (write-temp-then-rename).
    pub fn save_manifest(&self, manifest: &RunManifest) -> Result<(), StoreError> {
        let path = self.dir.join(MANIFEST_FILE);
        let tmp = self.dir.join(format!("{MANIFEST_FILE}.tmp"));
        let body = serde_json::to_string_pretty(manifest)
            .map_err(|e| StoreError::Corrupt(e.to_string()))?;
        fs::write(&tmp, body).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))?;
        Ok(())
    }

    /// Appends a batch of records to a stage file and fsyncs once per batch.
    pub fn append_batch<T: Serialize>(
        &self,
        file: StoreFile,
        items: &[T],
    ) -> Result<(), StoreError> {
        if items.is_empty() {
            return Ok(());
        }
        let path = self.file_path(file);
        let mut handle = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        let mut buf = String::new();
        for item in items {
            let line =
                serde_json::to_string(item).map_err(|e| StoreError::Corrupt(e.to_string()))?;
            buf.push_str(&line);
            buf.push('\n');
        }
        handle
            .write_all(buf.as_bytes())
            .map_err(|e| io_err(&path, e))?;
        handle.sync_all().map_err(|e| io_err(&path, e))?;
        Ok(())
    }

    /// Reads every record in a stage file; a missing file reads as empty.
    pub fn read_all<T: DeserializeOwned>(&self, file: StoreFile) -> Result<Vec<T>, StoreError> {
        let path = self.file_path(file);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let raw = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let mut out = Vec::new();
        for (idx, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(line).map_err(|e| StoreError::MalformedRecord {
                path: path.clone(),
                line: idx + 1,
                message: e.to_string(),
            })?;
            out.push(record);
        }
        Ok(out)
    }
}

/// A model response joined to the prompt and model that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredResponse {
    pub prompt_id: String,
    pub backend_id: String,
    pub model_id: String,
    #[serde(flatten)]
    pub response: ModelResponse,
}

/// Identity used for resume deduplication: re-running a stage skips any item
/// whose key is already present in the stage file.
pub trait StoredRecord {
    fn store_key(&self) -> String;
}

impl StoredRecord for Norm {
    fn store_key(&self) -> String {
        self.id.clone()
    }
}

impl StoredRecord for TestPrompt {
    fn store_key(&self) -> String {
        self.id.clone()
    }
}

impl StoredRecord for StoredResponse {
    fn store_key(&self) -> String {
        format!("{}\u{1f}{}", self.prompt_id, self.model_id)
    }
}

impl StoredRecord for SurfacingResult {
    fn store_key(&self) -> String {
        format!("{}\u{1f}{}", self.prompt_id, self.context)
    }
}

impl StoredRecord for ViolationVerdict {
    fn store_key(&self) -> String {
        format!(
            "{}\u{1f}{}\u{1f}{}",
            self.prompt_id, self.subject_model_id, self.context
        )
    }
}

impl RunStore {
    /// Keys already persisted for a stage file.
    pub fn existing_keys<T: DeserializeOwned + StoredRecord>(
        &self,
        file: StoreFile,
    ) -> Result<BTreeSet<String>, StoreError> {
        Ok(self
            .read_all::<T>(file)?
            .iter()
            .map(StoredRecord::store_key)
            .collect())
    }
}

/// Keys whose values vary across otherwise-identical runs and are therefore
/// excluded from determinism comparisons.
pub const VOLATILE_KEYS: [&str; 6] = [
    "created_at",
    "latency_ms",
    "started_at",
    "finished_at",
    "run_id",
    "output_dir",
];

fn strip_volatile(value: &mut Value) {
    match value {
        Value::Object(map) => {
            map.retain(|k, _| !VOLATILE_KEYS.contains(&k.as_str()));
            for v in map.values_mut() {
                strip_volatile(v);
            }
        }
        Value::Array(items) => {
            for v in items {
                strip_volatile(v);
            }
        }
        _ => {}
    }
}

/// Renders the whole run directory as one deterministic text snapshot with
/// volatile fields removed, for byte-level equality checks between runs.
pub fn canonicalized_snapshot(dir: &Path) -> Result<String, StoreError> {
    let store = RunStore::open(dir)?;
    let mut out = String::new();

    let manifest_path = dir.join(MANIFEST_FILE);
    let raw = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let mut manifest: Value =
        serde_json::from_str(&raw).map_err(|e| StoreError::Corrupt(e.to_string()))?;
    strip_volatile(&mut manifest);
    out.push_str(&format!("== {MANIFEST_FILE} ==\n{manifest}\n"));

    for file in StoreFile::ALL {
        out.push_str(&format!("== {} ==\n", file.file_name()));
        for mut record in store.read_all::<Value>(file)? {
            strip_volatile(&mut record);
            out.push_str(&record.to_string());
            out.push('\n');
        }
    }
    Ok(out)
}
