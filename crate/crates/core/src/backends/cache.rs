//! Persistent on-disk completion cache keyed by request fingerprint.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::{request_fingerprint, Backend, CompletionRequest, ModelResponse};
use crate::error::BackendError;
use crate::util::sha256_hex;

/// One content-addressed cache/fixture file: the full request alongside the
/// response, plus digests so silent mutation of either side is detectable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct CacheEntry {
    pub fingerprint: String,
    pub backend_id: String,
    pub request: CompletionRequest,
    pub response: ModelResponse,
    pub response_digest: String,
}

impl CacheEntry {
    pub fn new(backend_id: &str, request: &CompletionRequest, response: &ModelResponse) -> Self {
        CacheEntry {
            fingerprint: request.fingerprint(backend_id),
            backend_id: backend_id.to_string(),
            request: request.clone(),
            response: response.clone(),
            response_digest: sha256_hex(&response.text),
        }
    }

    /// Every stored hash must be recomputable from the stored content.
    pub fn verify(&self, expected_fingerprint: &str) -> bool {
        self.fingerprint == expected_fingerprint
            && self.response.request_fingerprint == expected_fingerprint
            && request_fingerprint(
                &self.backend_id,
                &self.request.model_id,
                &self.request.prompt,
                &self.request.params,
            ) == expected_fingerprint
            && sha256_hex(&self.response.text) == self.response_digest
    }
}

pub(crate) fn write_entry(path: &Path, entry: &CacheEntry) -> Result<(), BackendError> {
    let body = serde_json::to_vec_pretty(entry)
        .map_err(|e| BackendError::Cache(format!("serialize entry: {e}")))?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, body)
        .map_err(|e| BackendError::Cache(format!("write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)
        .map_err(|e| BackendError::Cache(format!("rename {}: {e}", path.display())))?;
    Ok(())
}

pub(crate) fn read_entry(path: &Path) -> Option<CacheEntry> {
    let body = fs::read(path).ok()?;
    serde_json::from_slice(&body).ok()
}

/// How a cached completion was satisfied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    /// Served from disk with zero backend calls.
    Hit,
    /// Not cached before; fetched and persisted.
    Miss,
    /// A cache file existed but failed verification; refetched.
    CorruptRefetched,
}

/// A completion plus how the cache satisfied it.
#[derive(Debug, Clone)]
pub struct CachedCompletion {
    pub response: ModelResponse,
    pub status: CacheStatus,
}

impl CachedCompletion {
    pub fn cache_hit(&self) -> bool {
        self.status == CacheStatus::Hit
    }
}

/// Wrapper persisting every completion under `dir`, keyed by fingerprint.
/// Repeat requests are served from disk without touching the inner backend.
pub struct CachedBackend<B> {
    inner: B,
    dir: PathBuf,
}

impl<B: Backend> CachedBackend<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)
            .map_err(|e| BackendError::Cache(format!("create {}: {e}", dir.display())))?;
        Ok(CachedBackend { inner, dir })
    }

    fn entry_path(&self, fingerprint: &str) -> PathBuf {
        self.dir.join(format!("{fingerprint}.json"))
    }

    /// Serve from cache when possible; report how the request was satisfied.
    pub fn cached_complete(
        &self,
        request: &CompletionRequest,
    ) -> Result<CachedCompletion, BackendError> {
        request.validate()?;
        let fingerprint = request.fingerprint(self.inner.id());
        let path = self.entry_path(&fingerprint);
        let mut status = CacheStatus::Miss;
        if path.exists() {
            match read_entry(&path) {
                Some(entry) if entry.verify(&fingerprint) => {
                    return Ok(CachedCompletion {
                        response: entry.response,
                        status: CacheStatus::Hit,
                    });
                }
                _ => status = CacheStatus::CorruptRefetched,
            }
        }
        let response = self.inner.complete(request)?;
        write_entry(&path, &CacheEntry::new(self.inner.id(), request, &response))?;
        Ok(CachedCompletion { response, status })
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<ModelResponse, BackendError> {
        self.cached_complete(request).map(|c| c.response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{CompletionParams, Purpose, ScriptStyle, ScriptedBackend};

    fn request(prompt: &str, temperature: Option<f64>) -> CompletionRequest {
        CompletionRequest {
            model_id: "m".to_string(),
            prompt: prompt.to_string(),
            params: CompletionParams {
                temperature,
                max_output_tokens: 256,
            },
            purpose: Purpose::SystemUnderTest,
        }
    }

    #[test]
    fn second_identical_request_is_a_hit() {
        let dir = tempfile::tempdir().unwrap();
        let inner = ScriptedBackend::styled("mock", ScriptStyle::Responder, 3);
        let cached = CachedBackend::new(&inner, dir.path()).unwrap();
        let req = request("hello", None);
        let first = cached.cached_complete(&req).unwrap();
        assert_eq!(first.status, CacheStatus::Miss);
        let second = cached.cached_complete(&req).unwrap();
        assert!(second.cache_hit());
        assert_eq!(second.response.text, first.response.text);
        assert_eq!(inner.calls(), 1);
    }

    #[test]
    fn different_params_miss_separately() {
        let dir = tempfile::tempdir().unwrap();
        let inner = ScriptedBackend::styled("mock", ScriptStyle::Responder, 3);
        let cached = CachedBackend::new(&inner, dir.path()).unwrap();
        cached.cached_complete(&request("hello", None)).unwrap();
        cached.cached_complete(&request("hello", Some(0.9))).unwrap();
        assert_eq!(inner.calls(), 2);
    }

    #[test]
    fn corrupted_entry_is_refetched_with_warning_status() {
        let dir = tempfile::tempdir().unwrap();
        let inner = ScriptedBackend::styled("mock", ScriptStyle::Responder, 3);
        let cached = CachedBackend::new(&inner, dir.path()).unwrap();
        let req = request("hello", None);
        cached.cached_complete(&req).unwrap();

        let fingerprint = req.fingerprint("mock");
        let path = dir.path().join(format!("{fingerprint}.json"));
        let mutated = fs::read_to_string(&path)
            .unwrap()
            .replace("hello", "hacked");
        fs::write(&path, mutated).unwrap();

        let again = cached.cached_complete(&req).unwrap();
        assert_eq!(again.status, CacheStatus::CorruptRefetched);
        assert_eq!(inner.calls(), 2);
        let healed = cached.cached_complete(&req).unwrap();
        assert!(healed.cache_hit());
    }

    #[test]
    fn garbage_entry_is_refetched() {
        let dir = tempfile::tempdir().unwrap();
        let inner = ScriptedBackend::styled("mock", ScriptStyle::Responder, 3);
        let cached = CachedBackend::new(&inner, dir.path()).unwrap();
        let req = request("hello", None);
        cached.cached_complete(&req).unwrap();
        let path = dir.path().join(format!("{}.json", req.fingerprint("mock")));
        fs::write(&path, "not json at all").unwrap();
        let again = cached.cached_complete(&req).unwrap();
        assert_eq!(again.status, CacheStatus::CorruptRefetched);
        assert_eq!(inner.calls(), 2);
    }
}
