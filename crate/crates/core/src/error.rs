//! Error types, one enum per subsystem plus a top-level wrapper for the CLI.

use std::path::PathBuf;

use thiserror::Error;

/// Failures raised by model backends.
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("authentication failed for backend `{backend}`: {message}")]
    Auth { backend: String, message: String },
    #[error("rate limited: {message}")]
    RateLimited { message: String },
    #[error("request timed out: {message}")]
    Timeout { message: String },
    #[error("transport error: {message}")]
    Transport { message: String },
    #[error("API error (status {status}): {message}")]
    Api { status: u16, message: String },
    #[error("replay miss: no fixture for fingerprint {fingerprint}")]
    ReplayMiss { fingerprint: String },
    #[error("prompt text must be non-empty")]
    EmptyPrompt,
    #[error("invalid completion parameters: {0}")]
    InvalidParams(String),
    #[error("scripted backend failure: {message}")]
    Scripted { message: String, transient: bool },
    #[error("cache error: {0}")]
    Cache(String),
    #[error("fixture archive error: {0}")]
    Archive(String),
    #[error("{last} (gave up after {attempts} attempts)")]
    Exhausted { attempts: u32, last: Box<BackendError> },
}

impl BackendError {
    /// Whether a retry could plausibly succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::RateLimited { .. }
            | BackendError::Timeout { .. }
            | BackendError::Transport { .. } => true,
            BackendError::Api { status, .. } => *status >= 500,
            BackendError::Scripted { transient, .. } => *transient,
            _ => false,
        }
    }
}

/// Failures in template assets and rendering.
#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("unresolved placeholder `{name}` in template")]
    UnresolvedPlaceholder { name: String },
    #[error("no template for intent `{intent}`, scenario `{scenario}`")]
    MissingTemplate { intent: String, scenario: String },
    #[error("template asset malformed at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("cannot read template asset `{path}`: {message}")]
    Unreadable { path: PathBuf, message: String },
}

/// Failures while loading or writing norm datasets.
#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read dataset `{path}`: {message}")]
    Unreadable { path: PathBuf, message: String },
    #[error("unrecognized dataset format: {0}")]
    UnrecognizedFormat(String),
    #[error("zero valid records in `{path}`")]
    ZeroValidRecords { path: PathBuf },
    #[error("field_map must cover `{0}` for this format")]
    IncompleteFieldMap(String),
    #[error("refusing to write an empty norm list")]
    EmptyWrite,
    #[error("duplicate norm id `{0}`")]
    DuplicateId(String),
    #[error("cannot write `{path}`: {message}")]
    Unwritable { path: PathBuf, message: String },
}

/// Failures in the judge pipeline (surfacing, violation detection, parsing).
#[derive(Debug, Error)]
pub enum JudgeError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("judge output unparseable after repair; raw output: {raw:?}")]
    Unparseable { raw: String },
}

/// Failures while auto-annotating norms.
#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error("judge produced labels failing validation on slots: {slots:?}")]
    InvalidLabels { slots: Vec<String> },
}

/// Failures in backend-assisted prompt generation.
#[derive(Debug, Error)]
pub enum PromptGenError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("generated prompt violated the country-mention invariant after {attempts} attempts: {detail}")]
    InvariantUnsatisfied { attempts: u32, detail: String },
}

/// Failures in the persistent run store.
#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store I/O error on `{path}`: {message}")]
    Io { path: PathBuf, message: String },
    #[error("malformed record in `{path}` line {line}: {message}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("no run found at `{dir}`")]
    MissingRun { dir: PathBuf },
    #[error("run store corrupt: {0}")]
    Corrupt(String),
}

/// Failures in orchestration of a pipeline run.
#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("stage `{stage}` failed: {message}")]
    StageFatal { stage: String, message: String },
}

/// Failures in report aggregation and rendering.
#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no cells to render")]
    NoCells,
    #[error("layout `{layout}` requires key field `{field}` on every cell")]
    MissingKeyField { layout: String, field: String },
    #[error("dangling reference: {kind} `{id}` cannot be resolved")]
    DanglingReference { kind: String, id: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Failures loading or validating a run-config file.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config `{path}`: {message}")]
    Unreadable { path: PathBuf, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown backend id `{0}` referenced by config")]
    UnknownBackend(String),
    #[error("bad --set override `{0}`: expected key=value")]
    BadOverride(String),
}

/// Top-level error for the CLI and FFI layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error(transparent)]
    PromptGen(#[from] PromptGenError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

impl Error {
    /// True for errors caused by bad configuration or usage rather than a
    /// failing pipeline stage; the CLI maps these to a distinct exit code.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Run(RunError::Config(_))
        )
    }
}
