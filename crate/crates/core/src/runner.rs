//! Orchestrates the four pipeline stages (prompts, responses, surfacing,
//! verdicts) over a dataset and model list, with a resumable on-disk store.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backends::{
    Backend, CachedBackend, CompletionParams, CompletionRequest, FixtureArchive, HttpBackend,
    HttpBackendConfig, Purpose, RecordingBackend, ReplayBackend, RetryPolicy,
    RetryingBackend, ScriptStyle, ScriptedBackend, ThrottledBackend,
};
use crate::error::{ConfigError, RunError};
use crate::ingest::{self, DatasetDescriptor};
use crate::judge::{detect_violation, surface_norms, JudgeTemplates, SurfacingResult, ViolationVerdict};
use crate::promptgen::{
    generate_prompts, generate_via_backend, GenerationMode, GeneratorMeta, MatrixConfig,
    PromptTemplateSet, TestPrompt,
};
use crate::report::{
    aggregate, aggregate_macro, coverage_report, emit_table, joined_rows, without_controls,
    OutputFormat, TableLayout,
};
use crate::store::{RunManifest, RunStore, Stage, StageStatus, StoreFile, StoredRecord, StoredResponse};
use crate::taxonomy::{InteractionalContext, Norm};
use crate::util::{context_key, normalize_token, parallel_map_ordered, string_enum};

string_enum! {
    /// Which norms are offered to the judge as surfacing candidates.
    SurfacingScope {
        SameCountry => "same_country",
        AllNorms => "all",
    }
}

/// A (backend, model) pair addressing one model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRef {
    pub backend: String,
    pub model_id: String,
}

/// How test prompts are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    #[serde(default = "default_generation_mode")]
    pub mode: GenerationMode,
    #[serde(default)]
    pub matrix: MatrixConfig,
    /// Required when `mode` is backend-generated.
    #[serde(default)]
    pub generator: Option<ModelRef>,
}

fn default_generation_mode() -> GenerationMode {
    GenerationMode::Template
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            mode: GenerationMode::Template,
            matrix: MatrixConfig::default(),
            generator: None,
        }
    }
}

/// One backend definition in the config file, dispatched on `kind`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    /// Deterministic synthesized backend; `style` is one of responder,
    /// judge, generator, or auto.
    Scripted {
        id: String,
        #[serde(default)]
        style: Option<String>,
        #[serde(default)]
        seed: Option<u64>,
    },
    Http(HttpBackendConfig),
}

impl BackendConfig {
    pub fn id(&self) -> &str {
        match self {
            BackendConfig::Scripted { id, .. } => id,
            BackendConfig::Http(cfg) => &cfg.id,
        }
    }
}

fn default_schema_version() -> u32 {
    1
}

fn default_parallelism() -> usize {
    4
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Everything one run needs; snapshotted verbatim into the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub run_id: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetDescriptor,
    pub backends: Vec<BackendConfig>,
    pub models_under_test: Vec<ModelRef>,
    pub judge: ModelRef,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub surfacing_scope: SurfacingScope,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Content-addressed response cache shared across runs; disabled when
    /// absent.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Count control (norm-irrelevant) verdicts in headline tables.
    #[serde(default)]
    pub include_controls: bool,
    /// Additionally emit per-norm macro-averaged tables.
    #[serde(default)]
    pub macro_average: bool,
}

impl Default for SurfacingScope {
    fn default() -> Self {
        SurfacingScope::SameCountry
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != 1 {
            return Err(ConfigError::Invalid(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        if self.models_under_test.is_empty() {
            return Err(ConfigError::Invalid(
                "at least one model under test is required".to_string(),
            ));
        }
        if self.parallelism == 0 {
            return Err(ConfigError::Invalid(
                "parallelism must be at least 1".to_string(),
            ));
        }
        let ids: BTreeSet<&str> = self.backends.iter().map(BackendConfig::id).collect();
        if ids.len() != self.backends.len() {
            return Err(ConfigError::Invalid(
                "backend ids must be unique".to_string(),
            ));
        }
        let mut referenced: Vec<&ModelRef> = self.models_under_test.iter().collect();
        referenced.push(&self.judge);
        if self.generation.mode == GenerationMode::BackendGenerated {
            match &self.generation.generator {
                Some(generator) => referenced.push(generator),
                None => {
                    return Err(ConfigError::Invalid(
                        "backend-generated prompts require a generator model".to_string(),
                    ))
                }
            }
        }
        for model in referenced {
            if !ids.contains(model.backend.as_str()) {
                return Err(ConfigError::UnknownBackend(model.backend.clone()));
            }
        }
        Ok(())
    }

    /// Re-anchors relative paths against the config file's directory.
    pub fn resolve_relative(&mut self, base: &Path) {
        let anchor = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        anchor(&mut self.dataset.path);
        anchor(&mut self.output_dir);
        if let Some(cache) = &mut self.cache_dir {
            anchor(cache);
        }
    }

    pub fn snapshot(&self) -> Result<Value, RunError> {
        serde_json::to_value(self).map_err(|e| RunError::Config(e.to_string()))
    }
}

/// Sets one dotted-path key in a JSON document, creating objects as needed.
/// The value is parsed as JSON when possible, else taken as a string.
pub fn apply_override(document: &mut Value, key: &str, raw: &str) -> Result<(), ConfigError> {
    if key.is_empty() {
        return Err(ConfigError::BadOverride(format!("{key}={raw}")));
    }
    let parsed: Value =
        serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cursor = document;
    for part in &parts[..parts.len() - 1] {
        cursor = cursor
            .as_object_mut()
            .ok_or_else(|| ConfigError::BadOverride(format!("{key}={raw}")))?
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    cursor
        .as_object_mut()
        .ok_or_else(|| ConfigError::BadOverride(format!("{key}={raw}")))?
        .insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Loads a config file, applies `--set` overrides, resolves relative paths,
/// and validates.
pub fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let raw = fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut document: Value =
        serde_json::from_str(&raw).map_err(|e| ConfigError::Parse(e.to_string()))?;
    for (key, value) in overrides {
        apply_override(&mut document, key, value)?;
    }
    let mut config: RunConfig =
        serde_json::from_value(document).map_err(|e| ConfigError::Parse(e.to_string()))?;
    config.resolve_relative(path.parent().unwrap_or_else(|| Path::new(".")));
    config.validate()?;
    Ok(config)
}

/// Live calls, replay from an archive, or live calls recorded into one.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum ExecutionMode {
    #[default]
    Live,
    Replay(PathBuf),
    Record(PathBuf),
}

/// Resolved backends for one run, with scripted call counters exposed for
/// cache and resume assertions.
pub struct BackendRegistry {
    handles: BTreeMap<String, Arc<dyn Backend>>,
    scripted: BTreeMap<String, Arc<ScriptedBackend>>,
}

impl BackendRegistry {
    pub fn get(&self, id: &str) -> Result<Arc<dyn Backend>, RunError> {
        self.handles
            .get(id)
            .cloned()
            .ok_or_else(|| RunError::Config(format!("unknown backend id `{id}`")))
    }

    pub fn scripted(&self, id: &str) -> Option<&Arc<ScriptedBackend>> {
        self.scripted.get(id)
    }

    /// Total completions served by scripted backends (cache misses only when
    /// a cache wraps them).
    pub fn scripted_calls(&self) -> u64 {
        self.scripted.values().map(|b| b.calls()).sum()
    }
}

fn script_style(style: Option<&str>) -> Result<ScriptStyle, ConfigError> {
    let token = style.map(normalize_token).unwrap_or_default();
    match token.as_str() {
        "" | "auto" => Ok(ScriptStyle::Auto),
        "responder" | "model" => Ok(ScriptStyle::Responder),
        "judge" => Ok(ScriptStyle::Judge),
        "generator" => Ok(ScriptStyle::Generator),
        other => Err(ConfigError::Invalid(format!(
            "unknown scripted style `{other}`"
        ))),
    }
}

/// Builds the backend stack for each configured backend id. Live backends
/// get retry + throttle (HTTP) and a shared cache when configured; record
/// mode wraps the stack in an archive recorder; replay mode substitutes the
/// archive for every backend.
pub fn build_registry(
    config: &RunConfig,
    mode: &ExecutionMode,
) -> Result<BackendRegistry, RunError> {
    let mut registry = BackendRegistry {
        handles: BTreeMap::new(),
        scripted: BTreeMap::new(),
    };

    if let ExecutionMode::Replay(path) = mode {
        let archive = Arc::new(
            FixtureArchive::open(path).map_err(|e| RunError::Config(e.to_string()))?,
        );
        for backend in &config.backends {
            let id = backend.id().to_string();
            registry.handles.insert(
                id.clone(),
                Arc::new(ReplayBackend::new(&id, archive.clone())),
            );
        }
        return Ok(registry);
    }

    let record_archive = match mode {
        ExecutionMode::Record(path) => Some(Arc::new(
            FixtureArchive::create(path).map_err(|e| RunError::Config(e.to_string()))?,
        )),
        _ => None,
    };

    for backend in &config.backends {
        let id = backend.id().to_string();
        let mut stack: Arc<dyn Backend> = match backend {
            BackendConfig::Scripted { id, style, seed } => {
                let style = script_style(style.as_deref())
                    .map_err(|e| RunError::Config(e.to_string()))?;
                let scripted = Arc::new(ScriptedBackend::styled(
                    id,
                    style,
                    seed.unwrap_or(config.seed),
                ));
                registry.scripted.insert(id.clone(), scripted.clone());
                scripted
            }
            BackendConfig::Http(http_config) => {
                let http = HttpBackend::new(http_config.clone())
                    .map_err(|e| RunError::Config(format!("backend `{id}`: {e}")))?;
                let retrying = RetryingBackend::new(http, RetryPolicy::default());
                Arc::new(ThrottledBackend::new(retrying, config.parallelism, None))
            }
        };
        if let Some(cache_dir) = &config.cache_dir {
            stack = Arc::new(
                CachedBackend::new(stack, cache_dir.join(&id))
                    .map_err(|e| RunError::Config(e.to_string()))?,
            );
        }
        if let Some(archive) = &record_archive {
            stack = Arc::new(RecordingBackend::new(stack, archive.clone()));
        }
        registry.handles.insert(id, stack);
    }
    Ok(registry)
}

fn timestamp_run_id() -> String {
    format!("run-{}", chrono::Utc::now().format("%Y%m%d-%H%M%S%3f"))
}

fn stage_fatal(
    store: &RunStore,
    manifest: &mut RunManifest,
    stage: Stage,
    message: String,
) -> RunError {
    manifest.record_failure(stage, &message);
    let _ = store.save_manifest(manifest);
    RunError::StageFatal {
        stage: stage.to_string(),
        message,
    }
}

/// Executes a full run from scratch. The run directory is created under the
/// config's output directory, named by the configured or generated run id.
pub fn run_pipeline(config: &RunConfig, mode: &ExecutionMode) -> Result<RunManifest, RunError> {
    run_pipeline_until(config, mode, None)
}

/// As `run_pipeline`, stopping after `until` when given.
pub fn run_pipeline_until(
    config: &RunConfig,
    mode: &ExecutionMode,
    until: Option<Stage>,
) -> Result<RunManifest, RunError> {
    config.validate().map_err(|e| RunError::Config(e.to_string()))?;
    let registry = build_registry(config, mode)?;
    let run_id = config.run_id.clone().unwrap_or_else(timestamp_run_id);
    let prompt_templates = PromptTemplateSet::builtin();
    let judge_templates = JudgeTemplates::builtin();
    let mut manifest = RunManifest::new(
        &run_id,
        config.snapshot()?,
        config.seed,
        &prompt_templates.version,
        judge_templates.version(),
    );
    let store = RunStore::create(&config.output_dir, &manifest)?;
    advance(&store, &mut manifest, config, &registry, until)?;
    Ok(manifest)
}

/// Continues an interrupted run from its manifest snapshot, skipping items
/// already persisted. Resuming a complete run is a no-op.
pub fn resume(run_dir: &Path, mode: &ExecutionMode) -> Result<RunManifest, RunError> {
    resume_until(run_dir, mode, None)
}

/// As `resume`, stopping after `until` when given.
pub fn resume_until(
    run_dir: &Path,
    mode: &ExecutionMode,
    until: Option<Stage>,
) -> Result<RunManifest, RunError> {
    let store = RunStore::open(run_dir)?;
    let mut manifest = store.load_manifest()?;
    if manifest.is_complete() {
        return Ok(manifest);
    }
    let config: RunConfig = serde_json::from_value(manifest.config.clone())
        .map_err(|e| RunError::Config(format!("manifest config snapshot: {e}")))?;
    let registry = build_registry(&config, mode)?;
    advance(&store, &mut manifest, &config, &registry, until)?;
    Ok(manifest)
}

const BATCH_SIZE: usize = 64;

/// Contexts every prompt is judged in.
pub const JUDGED_CONTEXTS: [InteractionalContext; 2] =
    [InteractionalContext::HumanHuman, InteractionalContext::HumanAi];

/// Runs every stage that is not yet complete, in order, stopping after
/// `until` when given. Reports are written once all stages complete.
pub fn advance(
    store: &RunStore,
    manifest: &mut RunManifest,
    config: &RunConfig,
    registry: &BackendRegistry,
    until: Option<Stage>,
) -> Result<(), RunError> {
    let norms = ensure_norms(store, manifest, config)?;
    let prompt_templates = PromptTemplateSet::builtin();
    let judge_templates = JudgeTemplates::builtin();

    for stage in Stage::ALL.iter().copied() {
        if let Some(limit) = until {
            if stage > limit {
                break;
            }
        }
        if manifest.stage(stage).status == StageStatus::Complete {
            continue;
        }
        manifest.begin_stage(stage)?;
        store.save_manifest(manifest)?;
        let result = match stage {
            Stage::Prompts => {
                stage_prompts(store, manifest, config, registry, &norms, &prompt_templates)
            }
            Stage::Responses => stage_responses(store, manifest, config, registry),
            Stage::Surfacing => {
                stage_surfacing(store, manifest, config, registry, &norms, &judge_templates)
            }
            Stage::Verdicts => {
                stage_verdicts(store, manifest, config, registry, &norms, &judge_templates)
            }
        };
        let (items, failures) = result?;
        manifest.complete_stage(stage, items, failures)?;
        store.save_manifest(manifest)?;
    }

    if manifest.is_complete() {
        if manifest.finished_at.is_none() {
            manifest.finished_at = Some(chrono::Utc::now().to_rfc3339());
            store.save_manifest(manifest)?;
        }
        emit_reports(store, config)?;
    }
    Ok(())
}

/// Loads the dataset into the store on first contact; later calls read the
/// persisted copy so resumed runs never depend on the original file.
fn ensure_norms(
    store: &RunStore,
    manifest: &mut RunManifest,
    config: &RunConfig,
) -> Result<Vec<Norm>, RunError> {
    let existing: Vec<Norm> = store.read_all(StoreFile::Norms)?;
    if !existing.is_empty() {
        return Ok(existing);
    }
    let outcome = ingest::load_norms(&config.dataset)
        .map_err(|e| stage_fatal(store, manifest, Stage::Prompts, e.to_string()))?;
    store.append_batch(StoreFile::Norms, &outcome.norms)?;
    Ok(outcome.norms)
}

fn stage_prompts(
    store: &RunStore,
    manifest: &mut RunManifest,
    config: &RunConfig,
    registry: &BackendRegistry,
    norms: &[Norm],
    templates: &PromptTemplateSet,
) -> Result<(u64, u64), RunError> {
    let existing = store.existing_keys::<TestPrompt>(StoreFile::Prompts)?;
    let mut written = existing.len() as u64;
    let mut failures = manifest.stage(Stage::Prompts).failures;

    match config.generation.mode {
        GenerationMode::Template => {
            for norm in norms {
                let prompts = generate_prompts(norm, templates, &config.generation.matrix)
                    .map_err(|e| stage_fatal(store, manifest, Stage::Prompts, e.to_string()))?;
                let fresh: Vec<TestPrompt> = prompts
                    .into_iter()
                    .filter(|p| !existing.contains(&p.store_key()))
                    .collect();
                store.append_batch(StoreFile::Prompts, &fresh)?;
                written += fresh.len() as u64;
            }
        }
        GenerationMode::BackendGenerated => {
            let generator_ref = config.generation.generator.as_ref().expect("validated");
            let generator = registry.get(&generator_ref.backend)?;
            let meta = GeneratorMeta::builtin();
            let cells = config.generation.matrix.cells();
            for norm in norms {
                let todo: Vec<_> = cells
                    .iter()
                    .filter(|(intent, scenario, country)| {
                        let id = crate::promptgen::prompt_id(
                            &norm.id,
                            *intent,
                            *scenario,
                            *country,
                            &meta.version,
                        );
                        !existing.contains(&id)
                    })
                    .collect();
                let results = parallel_map_ordered(&todo, config.parallelism, |_, cell| {
                    let (intent, scenario, country_mentioned) = **cell;
                    generate_via_backend(
                        norm,
                        intent,
                        scenario,
                        country_mentioned,
                        generator.as_ref(),
                        &generator_ref.model_id,
                        &meta,
                    )
                });
                let mut fresh = Vec::new();
                for result in results {
                    match result {
                        Ok(prompt) => fresh.push(prompt),
                        Err(_) => failures += 1,
                    }
                }
                store.append_batch(StoreFile::Prompts, &fresh)?;
                written += fresh.len() as u64;
                manifest.record_progress(Stage::Prompts, written, failures);
                store.save_manifest(manifest)?;
            }
        }
    }
    if written == 0 {
        return Err(stage_fatal(
            store,
            manifest,
            Stage::Prompts,
            "no prompts generated".to_string(),
        ));
    }
    Ok((written, failures))
}

fn stage_responses(
    store: &RunStore,
    manifest: &mut RunManifest,
    config: &RunConfig,
    registry: &BackendRegistry,
) -> Result<(u64, u64), RunError> {
    let prompts: Vec<TestPrompt> = store.read_all(StoreFile::Prompts)?;
    let existing = store.existing_keys::<StoredResponse>(StoreFile::Responses)?;
    let mut backends: BTreeMap<&str, Arc<dyn Backend>> = BTreeMap::new();
    for model in &config.models_under_test {
        backends.insert(model.backend.as_str(), registry.get(&model.backend)?);
    }

    let mut todo: Vec<(&TestPrompt, &ModelRef)> = Vec::new();
    for prompt in &prompts {
        for model in &config.models_under_test {
            let key = format!("{}\u{1f}{}", prompt.id, model.model_id);
            if !existing.contains(&key) {
                todo.push((prompt, model));
            }
        }
    }

    let mut written = existing.len() as u64;
    let mut failures = manifest.stage(Stage::Responses).failures;
    for chunk in todo.chunks(BATCH_SIZE) {
        let results = parallel_map_ordered(chunk, config.parallelism, |_, (prompt, model)| {
            let backend = &backends[model.backend.as_str()];
            let request = CompletionRequest {
                model_id: model.model_id.clone(),
                prompt: prompt.text.clone(),
                params: CompletionParams::provider_defaults(),
                purpose: Purpose::SystemUnderTest,
            };
            backend
                .complete(&request)
                .map(|response| StoredResponse {
                    prompt_id: prompt.id.clone(),
                    backend_id: model.backend.clone(),
                    model_id: model.model_id.clone(),
                    response,
                })
        });
        let mut batch = Vec::new();
        for result in results {
            match result {
                Ok(response) => batch.push(response),
                Err(_) => failures += 1,
            }
        }
        store.append_batch(StoreFile::Responses, &batch)?;
        written += batch.len() as u64;
        manifest.record_progress(Stage::Responses, written, failures);
        store.save_manifest(manifest)?;
    }

    if written == 0 && !todo.is_empty() {
        return Err(stage_fatal(
            store,
            manifest,
            Stage::Responses,
            "every response request failed".to_string(),
        ));
    }
    Ok((written, failures))
}

/// Candidate norms for a prompt derived from `norm`: all loaded norms, or
/// only those sharing its cultural context.
fn surfacing_candidates(norms: &[Norm], norm: &Norm, scope: SurfacingScope) -> Vec<Norm> {
    match scope {
        SurfacingScope::AllNorms => norms.to_vec(),
        SurfacingScope::SameCountry => {
            let key = context_key(&norm.cultural_context);
            norms
                .iter()
                .filter(|n| context_key(&n.cultural_context) == key)
                .cloned()
                .collect()
        }
    }
}

fn stage_surfacing(
    store: &RunStore,
    manifest: &mut RunManifest,
    config: &RunConfig,
    registry: &BackendRegistry,
    norms: &[Norm],
    templates: &JudgeTemplates,
) -> Result<(u64, u64), RunError> {
    let prompts: Vec<TestPrompt> = store.read_all(StoreFile::Prompts)?;
    let existing = store.existing_keys::<SurfacingResult>(StoreFile::Surfacing)?;
    let judge = registry.get(&config.judge.backend)?;
    let norm_index: BTreeMap<&str, &Norm> = norms.iter().map(|n| (n.id.as_str(), n)).collect();

    let mut candidates_by_norm: BTreeMap<&str, Arc<Vec<Norm>>> = BTreeMap::new();
    for norm in norms {
        candidates_by_norm.insert(
            norm.id.as_str(),
            Arc::new(surfacing_candidates(norms, norm, config.surfacing_scope)),
        );
    }

    let mut todo: Vec<(&TestPrompt, InteractionalContext, Arc<Vec<Norm>>)> = Vec::new();
    for prompt in &prompts {
        let Some(_) = norm_index.get(prompt.norm_id.as_str()) else {
            continue;
        };
        let candidates = candidates_by_norm[prompt.norm_id.as_str()].clone();
        for context in JUDGED_CONTEXTS {
            let key = format!("{}\u{1f}{}", prompt.id, context);
            if !existing.contains(&key) {
                todo.push((prompt, context, candidates.clone()));
            }
        }
    }

    let mut written = existing.len() as u64;
    let mut failures = manifest.stage(Stage::Surfacing).failures;
    let mut successes_this_session = 0u64;
    for chunk in todo.chunks(BATCH_SIZE) {
        let results = parallel_map_ordered(chunk, config.parallelism, |_, item| {
            let (prompt, context, candidates) = item;
            surface_norms(
                prompt,
                candidates.as_slice(),
                *context,
                judge.as_ref(),
                &config.judge.model_id,
                templates,
            )
        });
        let mut batch = Vec::new();
        for result in results {
            match result {
                Ok(surfaced) => batch.push(surfaced),
                Err(_) => failures += 1,
            }
        }
        successes_this_session += batch.len() as u64;
        store.append_batch(StoreFile::Surfacing, &batch)?;
        written += batch.len() as u64;
        manifest.record_progress(Stage::Surfacing, written, failures);
        store.save_manifest(manifest)?;
    }

    if successes_this_session == 0 && !todo.is_empty() {
        return Err(stage_fatal(
            store,
            manifest,
            Stage::Surfacing,
            "judge produced no surfacing results".to_string(),
        ));
    }
    Ok((written, failures))
}

fn stage_verdicts(
    store: &RunStore,
    manifest: &mut RunManifest,
    config: &RunConfig,
    registry: &BackendRegistry,
    norms: &[Norm],
    templates: &JudgeTemplates,
) -> Result<(u64, u64), RunError> {
    let prompts: Vec<TestPrompt> = store.read_all(StoreFile::Prompts)?;
    let responses: Vec<StoredResponse> = store.read_all(StoreFile::Responses)?;
    let surfacing: Vec<SurfacingResult> = store.read_all(StoreFile::Surfacing)?;
    let existing = store.existing_keys::<ViolationVerdict>(StoreFile::Verdicts)?;
    let judge = registry.get(&config.judge.backend)?;

    let prompt_index: BTreeMap<&str, &TestPrompt> =
        prompts.iter().map(|p| (p.id.as_str(), p)).collect();
    let surfacing_index: BTreeMap<(&str, InteractionalContext), &SurfacingResult> = surfacing
        .iter()
        .map(|s| ((s.prompt_id.as_str(), s.context), s))
        .collect();

    let mut todo: Vec<(&StoredResponse, &TestPrompt, &SurfacingResult)> = Vec::new();
    for response in &responses {
        let Some(prompt) = prompt_index.get(response.prompt_id.as_str()) else {
            continue;
        };
        for context in JUDGED_CONTEXTS {
            let Some(surfaced) = surfacing_index.get(&(response.prompt_id.as_str(), context))
            else {
                continue;
            };
            let key = format!(
                "{}\u{1f}{}\u{1f}{}",
                response.prompt_id, response.model_id, context
            );
            if !existing.contains(&key) {
                todo.push((response, prompt, surfaced));
            }
        }
    }

    let mut written = existing.len() as u64;
    let mut failures = manifest.stage(Stage::Verdicts).failures;
    let mut successes_this_session = 0u64;
    for chunk in todo.chunks(BATCH_SIZE) {
        let results = parallel_map_ordered(chunk, config.parallelism, |_, item| {
            let (response, prompt, surfaced) = item;
            detect_violation(
                prompt,
                &response.response,
                &response.model_id,
                surfaced,
                norms,
                judge.as_ref(),
                &config.judge.model_id,
                templates,
            )
        });
        let mut batch = Vec::new();
        for result in results {
            match result {
                Ok(verdict) => batch.push(verdict),
                Err(_) => failures += 1,
            }
        }
        successes_this_session += batch.len() as u64;
        store.append_batch(StoreFile::Verdicts, &batch)?;
        written += batch.len() as u64;
        manifest.record_progress(Stage::Verdicts, written, failures);
        store.save_manifest(manifest)?;
    }

    if successes_this_session == 0 && !todo.is_empty() {
        return Err(stage_fatal(
            store,
            manifest,
            Stage::Verdicts,
            "judge produced no verdicts".to_string(),
        ));
    }
    Ok((written, failures))
}

/// Renders the standard report artifacts into the run directory: headline
/// model-by-context table, per-dimension breakdowns, a control-noise table,
/// and a coverage summary.
pub fn emit_reports(store: &RunStore, config: &RunConfig) -> Result<(), RunError> {
    let as_fatal = |e: crate::error::ReportError| RunError::StageFatal {
        stage: "report".to_string(),
        message: e.to_string(),
    };
    let rows = joined_rows(store).map_err(as_fatal)?;
    let headline = if config.include_controls {
        rows.clone()
    } else {
        without_controls(&rows)
    };

    let write = |name: &str, body: &str| -> Result<(), RunError> {
        let path = store.dir().join(name);
        fs::write(&path, body).map_err(|e| {
            RunError::Store(crate::error::StoreError::Io {
                path,
                message: e.to_string(),
            })
        })
    };

    for layout in [
        TableLayout::Table2Layout,
        TableLayout::CountryBreakdown,
        TableLayout::IntentBreakdown,
        TableLayout::SituationalBreakdown,
    ] {
        let cells = aggregate(&headline, layout.group_by());
        if cells.is_empty() {
            continue;
        }
        for format in [
            OutputFormat::DelimitedTable,
            OutputFormat::MarkdownTable,
            OutputFormat::PlotData,
        ] {
            let body = emit_table(&cells, layout, format).map_err(as_fatal)?;
            write(&layout.artifact_name(format), &body)?;
        }
        if config.macro_average {
            let macro_cells = aggregate_macro(&headline, layout.group_by());
            let body = emit_table(&macro_cells, layout, OutputFormat::DelimitedTable)
                .map_err(as_fatal)?;
            write(&format!("{layout}_macro.csv"), &body)?;
        }
    }

    // Intent rates pooled over models, complementing the per-model
    // intent_breakdown table whose denominators differ.
    let pooled = aggregate(&headline, &[crate::report::GroupField::Intent]);
    if !pooled.is_empty() {
        let mut csv = String::from("intent,violations,total,rate\n");
        let mut plot = String::new();
        for cell in &pooled {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                cell.key.intent.map(|i| i.to_string()).unwrap_or_default(),
                cell.violations,
                cell.total,
                cell.rate.map(|r| format!("{r:.2}")).unwrap_or_default()
            ));
            let line = serde_json::to_string(cell)
                .map_err(|e| RunError::Config(e.to_string()))?;
            plot.push_str(&line);
            plot.push('\n');
        }
        write("intent_breakdown_pooled.csv", &csv)?;
        write("intent_breakdown_pooled.plot.jsonl", &plot)?;
    }

    let controls: Vec<_> = rows
        .iter()
        .filter(|r| r.prompt.scenario == crate::promptgen::ScenarioType::NormIrrelevant)
        .cloned()
        .collect();
    if !controls.is_empty() {
        let cells = aggregate(&controls, &[crate::report::GroupField::Model]);
        let mut body = String::from("model,violations,total,rate\n");
        for cell in &cells {
            body.push_str(&format!(
                "{},{},{},{}\n",
                cell.key.model_id.clone().unwrap_or_default(),
                cell.violations,
                cell.total,
                cell.rate.map(|r| format!("{r:.2}")).unwrap_or_default()
            ));
        }
        write("control_noise.csv", &body)?;
    }

    let coverage = coverage_report(store).map_err(as_fatal)?;
    let body = serde_json::to_string_pretty(&coverage)
        .map_err(|e| RunError::Config(e.to_string()))?;
    write("coverage.json", &body)?;
    Ok(())
}
