//! Uniform chat-completion access: one `Backend` trait implemented by a live
//! HTTP client, a persistent cache wrapper, a record/replay fixture store,
//! and a scripted mock for tests.

mod cache;
mod http;
mod replay;
mod scripted;

pub use cache::{CacheStatus, CachedBackend, CachedCompletion};
pub use http::{HttpBackend, HttpBackendConfig};
pub use replay::{record_fixtures, FixtureArchive, RecordingBackend, ReplayBackend};
pub use scripted::{ScriptMode, ScriptStyle, ScriptedBackend};

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::BackendError;
use crate::util::sha256_hex;

/// Sampling parameters for one completion call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    /// Sampling temperature; `None` leaves the provider default in place.
    pub temperature: Option<f64>,
    /// Output token cap.
    pub max_output_tokens: u32,
}

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 1024;

impl CompletionParams {
    /// Provider defaults: no temperature override.
    pub fn provider_defaults() -> Self {
        CompletionParams {
            temperature: None,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }

    /// Judge calls pin temperature 0 so verdicts are reproducible.
    pub fn judge_defaults() -> Self {
        CompletionParams {
            temperature: Some(0.0),
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }

    fn validate(&self) -> Result<(), BackendError> {
        if let Some(t) = self.temperature {
            if !(t >= 0.0) {
                return Err(BackendError::InvalidParams(format!(
                    "temperature must be >= 0, got {t}"
                )));
            }
        }
        if self.max_output_tokens == 0 {
            return Err(BackendError::InvalidParams(
                "max_output_tokens must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// What a completion is for; informs default params and logging, but is
/// deliberately excluded from the request fingerprint (a model's output does
/// not depend on why we asked).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    SystemUnderTest,
    Judge,
    Generator,
}

/// One chat-completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_id: String,
    pub prompt: String,
    pub params: CompletionParams,
    pub purpose: Purpose,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.prompt.is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        self.params.validate()
    }

    /// Fingerprint of this request as served by `backend_id`.
    pub fn fingerprint(&self, backend_id: &str) -> String {
        request_fingerprint(backend_id, &self.model_id, &self.prompt, &self.params)
    }
}

/// Stable hash identifying a request: backend id, model, prompt, and params.
/// Equal requests fingerprint identically across processes and platforms.
pub fn request_fingerprint(
    backend_id: &str,
    model_id: &str,
    prompt: &str,
    params: &CompletionParams,
) -> String {
    let temp = match params.temperature {
        Some(t) => t.to_string(),
        None => "default".to_string(),
    };
    sha256_hex(&format!(
        "v1\x1f{backend_id}\x1f{model_id}\x1f{prompt}\x1ftemp={temp}\x1fmax_tokens={}",
        params.max_output_tokens
    ))
}

/// One completion result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    /// Fingerprint of the request that produced this response.
    pub request_fingerprint: String,
    pub text: String,
    /// True when the provider legitimately returned no text; distinguishes
    /// an intentional empty output from a broken one.
    pub empty_output: bool,
    /// RFC 3339 creation time; excluded from replay-determinism comparisons.
    pub created_at: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

impl ModelResponse {
    pub fn new(request_fingerprint: String, text: String, latency_ms: u64) -> Self {
        let empty_output = text.is_empty();
        ModelResponse {
            request_fingerprint,
            text,
            empty_output,
            created_at: chrono::Utc::now().to_rfc3339(),
            latency_ms,
            attempt_count: 1,
        }
    }
}

/// A chat-completion provider. Implementations are safe for concurrent use.
pub trait Backend: Send + Sync {
    /// Stable identifier; part of every request fingerprint.
    fn id(&self) -> &str;

    fn complete(&self, request: &CompletionRequest) -> Result<ModelResponse, BackendError>;
}

/// Retry schedule for transient failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 250,
            max_delay_ms: 4_000,
        }
    }
}

impl RetryPolicy {
    fn delay_for(&self, attempt: u32) -> Duration {
        let exp = self.base_delay_ms.saturating_mul(1u64 << attempt.min(16));
        Duration::from_millis(exp.min(self.max_delay_ms))
    }
}

/// Wrapper retrying transient failures with exponential backoff. The returned
/// response's `attempt_count` counts every attempt made, including failures.
pub struct RetryingBackend<B> {
    inner: B,
    policy: RetryPolicy,
}

impl<B: Backend> RetryingBackend<B> {
    pub fn new(inner: B, policy: RetryPolicy) -> Self {
        RetryingBackend { inner, policy }
    }
}

impl<B: Backend> Backend for RetryingBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<ModelResponse, BackendError> {
        let attempts = self.policy.max_attempts.max(1);
        let mut last_err = None;
        for attempt in 0..attempts {
            match self.inner.complete(request) {
                Ok(mut response) => {
                    response.attempt_count = attempt + 1;
                    return Ok(response);
                }
                Err(err) if err.is_transient() && attempt + 1 < attempts => {
                    std::thread::sleep(self.policy.delay_for(attempt));
                    last_err = Some(err);
                }
                Err(err) if err.is_transient() => {
                    return Err(BackendError::Exhausted {
                        attempts,
                        last: Box::new(err),
                    });
                }
                Err(err) => return Err(err),
            }
        }
        Err(BackendError::Exhausted {
            attempts,
            last: Box::new(last_err.expect("loop ran at least once")),
        })
    }
}

/// Wrapper bounding concurrent in-flight requests and optionally pacing
/// request starts to a minimum interval.
pub struct ThrottledBackend<B> {
    inner: B,
    ceiling: usize,
    in_flight: Mutex<usize>,
    slot_free: Condvar,
    min_interval: Option<Duration>,
    last_start: Mutex<Option<Instant>>,
}

impl<B: Backend> ThrottledBackend<B> {
    pub fn new(inner: B, ceiling: usize, min_interval: Option<Duration>) -> Self {
        ThrottledBackend {
            inner,
            ceiling: ceiling.max(1),
            in_flight: Mutex::new(0),
            slot_free: Condvar::new(),
            min_interval,
            last_start: Mutex::new(None),
        }
    }

    fn pace(&self) {
        let Some(interval) = self.min_interval else {
            return;
        };
        // Holding the lock while sleeping serializes starts, which is the point.
        let mut last = self.last_start.lock().unwrap();
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < interval {
                std::thread::sleep(interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }
}

impl<B: Backend> Backend for ThrottledBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<ModelResponse, BackendError> {
        let mut count = self.in_flight.lock().unwrap();
        while *count >= self.ceiling {
            count = self.slot_free.wait(count).unwrap();
        }
        *count += 1;
        drop(count);
        self.pace();
        let result = self.inner.complete(request);
        *self.in_flight.lock().unwrap() -= 1;
        self.slot_free.notify_one();
        result
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<ModelResponse, BackendError> {
        (**self).complete(request)
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<ModelResponse, BackendError> {
        (**self).complete(request)
    }
}
