//! Record/replay fixture archive: a directory of content-addressed
//! request/response files plus an index manifest, letting whole pipeline runs
//! execute offline and byte-identically.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backends::cache::{read_entry, write_entry, CacheEntry};
use crate::backends::{Backend, CompletionRequest, ModelResponse};
use crate::error::BackendError;

const INDEX_FILE: &str = "index.json";

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveIndex {
    version: u32,
    /// fingerprint -> entry file name
    entries: BTreeMap<String, String>,
}

/// A directory of recorded completions addressable by request fingerprint.
pub struct FixtureArchive {
    dir: PathBuf,
    index: Mutex<ArchiveIndex>,
}

impl FixtureArchive {
    /// Create an empty archive (or adopt an existing one) at `dir`.
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)
            .map_err(|e| BackendError::Archive(format!("create {}: {e}", dir.display())))?;
        if dir.join(INDEX_FILE).exists() {
            return Self::open(dir);
        }
        let archive = FixtureArchive {
            dir,
            index: Mutex::new(ArchiveIndex {
                version: 1,
                entries: BTreeMap::new(),
            }),
        };
        archive.flush()?;
        Ok(archive)
    }

    /// Open an existing archive; errors if the index manifest is missing.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        let index_path = dir.join(INDEX_FILE);
        let body = fs::read(&index_path).map_err(|e| {
            BackendError::Archive(format!("read {}: {e}", index_path.display()))
        })?;
        let index: ArchiveIndex = serde_json::from_slice(&body)
            .map_err(|e| BackendError::Archive(format!("parse {}: {e}", index_path.display())))?;
        Ok(FixtureArchive {
            dir,
            index: Mutex::new(index),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.index.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stored response for a fingerprint, if recorded.
    pub fn get(&self, fingerprint: &str) -> Option<ModelResponse> {
        let file = self.index.lock().unwrap().entries.get(fingerprint).cloned()?;
        let entry = read_entry(&self.dir.join(file))?;
        if entry.verify(fingerprint) {
            Some(entry.response)
        } else {
            None
        }
    }

    /// Record one completion and persist the updated index.
    pub fn record(
        &self,
        backend_id: &str,
        request: &CompletionRequest,
        response: &ModelResponse,
    ) -> Result<(), BackendError> {
        let entry = CacheEntry::new(backend_id, request, response);
        let file = format!("{}.json", entry.fingerprint);
        write_entry(&self.dir.join(&file), &entry)
            .map_err(|e| BackendError::Archive(e.to_string()))?;
        let mut index = self.index.lock().unwrap();
        index.entries.insert(entry.fingerprint.clone(), file);
        Self::flush_locked(&self.dir, &index)
    }

    fn flush(&self) -> Result<(), BackendError> {
        let index = self.index.lock().unwrap();
        Self::flush_locked(&self.dir, &index)
    }

    /// Persists the index. Callers must hold the index lock so concurrent
    /// recordings do not race on the temp file.
    fn flush_locked(dir: &Path, index: &ArchiveIndex) -> Result<(), BackendError> {
        let index_path = dir.join(INDEX_FILE);
        let body = serde_json::to_vec_pretty(index)
            .map_err(|e| BackendError::Archive(format!("serialize index: {e}")))?;
        let tmp = index_path.with_extension("json.tmp");
        fs::write(&tmp, body)
            .map_err(|e| BackendError::Archive(format!("write {}: {e}", tmp.display())))?;
        fs::rename(&tmp, &index_path)
            .map_err(|e| BackendError::Archive(format!("rename {}: {e}", index_path.display())))?;
        Ok(())
    }
}

/// Wrapper recording every completion that passes through it.
pub struct RecordingBackend<B> {
    inner: B,
    archive: std::sync::Arc<FixtureArchive>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B, archive: std::sync::Arc<FixtureArchive>) -> Self {
        RecordingBackend { inner, archive }
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<ModelResponse, BackendError> {
        let response = self.inner.complete(request)?;
        self.archive.record(self.inner.id(), request, &response)?;
        Ok(response)
    }
}

/// Offline backend answering only from an archive; unknown requests are a
/// replay miss naming the fingerprint they would need.
pub struct ReplayBackend {
    id: String,
    archive: std::sync::Arc<FixtureArchive>,
}

impl ReplayBackend {
    /// `id` must match the backend id used when recording, since it is part
    /// of every fingerprint.
    pub fn new(id: &str, archive: std::sync::Arc<FixtureArchive>) -> Self {
        ReplayBackend {
            id: id.to_string(),
            archive,
        }
    }
}

impl Backend for ReplayBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<ModelResponse, BackendError> {
        request.validate()?;
        let fingerprint = request.fingerprint(&self.id);
        self.archive
            .get(&fingerprint)
            .ok_or(BackendError::ReplayMiss { fingerprint })
    }
}

/// Run `requests` against a live backend, recording everything into a fresh
/// archive at `dir`.
pub fn record_fixtures<B: Backend>(
    backend: &B,
    requests: &[CompletionRequest],
    dir: impl Into<PathBuf>,
) -> Result<std::sync::Arc<FixtureArchive>, BackendError> {
    let archive = std::sync::Arc::new(FixtureArchive::create(dir)?);
    let recorder = RecordingBackend::new(backend, archive.clone());
    for request in requests {
        recorder.complete(request)?;
    }
    Ok(archive)
}
