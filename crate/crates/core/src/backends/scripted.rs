//! Deterministic in-process backend for tests and offline demo runs. Styles
//! synthesize plausible output for each pipeline role from a stable hash of
//! the request, so repeated runs produce identical bytes without a network.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{LazyLock, Mutex};
use std::time::Duration;

use regex::Regex;

use crate::backends::{Backend, CompletionRequest, ModelResponse, Purpose};
use crate::error::BackendError;
use crate::util::stable_hash_u64;

/// How a scripted backend produces text.
pub enum ScriptMode {
    /// Synthesized output for one pipeline role.
    Style(ScriptStyle),
    /// Pop exact canned texts in order; erroring when exhausted.
    Queue(Mutex<VecDeque<String>>),
    /// Arbitrary function of the request.
    Closure(Box<dyn Fn(&CompletionRequest) -> Result<String, BackendError> + Send + Sync>),
}

/// Synthesized-output flavors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScriptStyle {
    /// Assistant-style reply to a user prompt.
    Responder,
    /// Judge replies: surfacing lists, violation verdicts, label JSON.
    Judge,
    /// User-prompt generator honoring the country-mention contract.
    Generator,
    /// Dispatch on the request's declared purpose.
    Auto,
}

/// Scripted chat backend with call accounting for concurrency assertions.
pub struct ScriptedBackend {
    id: String,
    seed: u64,
    mode: ScriptMode,
    fail_first: AtomicU32,
    delay: Option<Duration>,
    calls: AtomicU64,
    in_flight: AtomicU64,
    max_in_flight: AtomicU64,
}

impl ScriptedBackend {
    pub fn styled(id: &str, style: ScriptStyle, seed: u64) -> Self {
        Self::with_mode(id, ScriptMode::Style(style), seed)
    }

    pub fn queue(id: &str, texts: Vec<String>) -> Self {
        Self::with_mode(id, ScriptMode::Queue(Mutex::new(texts.into())), 0)
    }

    pub fn closure<F>(id: &str, f: F) -> Self
    where
        F: Fn(&CompletionRequest) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        Self::with_mode(id, ScriptMode::Closure(Box::new(f)), 0)
    }

    pub fn with_mode(id: &str, mode: ScriptMode, seed: u64) -> Self {
        ScriptedBackend {
            id: id.to_string(),
            seed,
            mode,
            fail_first: AtomicU32::new(0),
            delay: None,
            calls: AtomicU64::new(0),
            in_flight: AtomicU64::new(0),
            max_in_flight: AtomicU64::new(0),
        }
    }

    /// Fail the first `n` calls with a transient timeout, then behave normally.
    pub fn fail_first(self, n: u32) -> Self {
        self.fail_first.store(n, Ordering::SeqCst);
        self
    }

    /// Sleep inside each call, making concurrency ceilings observable.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }

    /// Calls that reached this backend, including ones that failed.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// Highest number of concurrently executing calls observed.
    pub fn max_in_flight(&self) -> u64 {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    fn decide(&self, salt: &str, key: &str) -> u64 {
        stable_hash_u64(&format!("{}|{salt}|{key}", self.seed))
    }

    fn styled_text(&self, style: ScriptStyle, req: &CompletionRequest) -> String {
        match style {
            ScriptStyle::Auto => {
                let resolved = match req.purpose {
                    Purpose::SystemUnderTest => ScriptStyle::Responder,
                    Purpose::Judge => ScriptStyle::Judge,
                    Purpose::Generator => ScriptStyle::Generator,
                };
                self.styled_text(resolved, req)
            }
            ScriptStyle::Responder => self.responder_text(req),
            ScriptStyle::Judge => self.judge_text(req),
            ScriptStyle::Generator => self.generator_text(req),
        }
    }

    fn responder_text(&self, req: &CompletionRequest) -> String {
        let h = self.decide("respond", &format!("{}|{}", req.model_id, req.prompt));
        let stances = [
            "That is a thoughtful question. I would lean toward following the local custom here.",
            "Honestly, I would not worry about it too much; do whatever feels natural to you.",
            "There are good arguments on both sides, but being considerate of your hosts matters most.",
            "You could simply ask someone you trust there; practices differ between households.",
            "Many people skip this custom nowadays, so you would not stand out if you did too.",
        ];
        let stance = stances[(h % stances.len() as u64) as usize];
        format!("{stance} (reply {:x} from {})", h % 0x10000, req.model_id)
    }

    fn judge_text(&self, req: &CompletionRequest) -> String {
        if req.prompt.contains("Output True or False") {
            self.violation_judge_text(req)
        } else if req.prompt.contains("None of the above") {
            self.surfacing_judge_text(req)
        } else if req.prompt.contains("adherence") {
            self.annotation_judge_text(req)
        } else {
            self.responder_text(req)
        }
    }

    fn surfacing_judge_text(&self, req: &CompletionRequest) -> String {
        let ids = listed_ids(&req.prompt);
        let picked: Vec<&String> = ids
            .iter()
            .filter(|id| {
                self.decide("surface", &format!("{}|{id}|{}", req.model_id, req.prompt)) % 3 != 0
            })
            .collect();
        if picked.is_empty() {
            return "None of the above.".to_string();
        }
        match self.decide("surface-fmt", &req.prompt) % 3 {
            0 => format!(
                "{{\"norms\": [{}]}}",
                picked
                    .iter()
                    .map(|id| format!("\"{id}\""))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
            1 => format!(
                "```json\n{{\"norms\": [{}]}}\n```",
                picked
                    .iter()
                    .map(|id| format!("\"{id}\""))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
            _ => format!(
                "The relevant ones are: {}.",
                picked
                    .iter()
                    .map(|id| format!("[{id}]"))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        }
    }

    fn violation_judge_text(&self, req: &CompletionRequest) -> String {
        let ids = listed_ids(&req.prompt);
        let violated: Vec<&String> = ids
            .iter()
            .filter(|id| {
                self.decide("violate", &format!("{}|{id}|{}", req.model_id, req.prompt)) % 5 == 0
            })
            .collect();
        match self.decide("violate-fmt", &req.prompt) % 3 {
            0 => format!(
                "{{\"violated\": {}, \"norms\": [{}]}}",
                !violated.is_empty(),
                violated
                    .iter()
                    .map(|id| format!("\"{id}\""))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
            1 if violated.is_empty() => "False.".to_string(),
            1 => format!(
                "True. The norms violated: {}.",
                violated
                    .iter()
                    .map(|id| format!("[{id}]"))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
            _ if violated.is_empty() => "The answer is False.".to_string(),
            _ => format!(
                "```json\n{{\"violated\": true, \"norms\": [{}]}}\n```",
                violated
                    .iter()
                    .map(|id| format!("\"{id}\""))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        }
    }

    fn annotation_judge_text(&self, req: &CompletionRequest) -> String {
        let h = self.decide("annotate", &req.prompt);
        let situational = if h % 2 == 0 {
            "general"
        } else {
            "situation_specific"
        };
        let interactional = if h % 3 == 0 {
            "\"human_human\", \"human_ai\""
        } else {
            "\"human_human\""
        };
        let conduct = match h % 4 {
            0 => "\"behavior\"",
            1 => "\"language\"",
            2 => "\"behavior\", \"belief\"",
            _ => "\"belief\"",
        };
        let articulation = if h % 5 == 0 {
            "\"prescriptive\", \"descriptive\""
        } else if h % 2 == 0 {
            "\"descriptive\""
        } else {
            "\"prescriptive\""
        };
        format!(
            "{{\"situational\": \"{situational}\", \"interactional\": [{interactional}], \
             \"conduct\": [{conduct}], \"articulation\": [{articulation}], \
             \"adherence\": [\"informal\"]}}"
        )
    }

    fn generator_text(&self, req: &CompletionRequest) -> String {
        let norm_text = quoted_fragment(&req.prompt).unwrap_or("this custom");
        let country = generator_country(&req.prompt);
        let h = self.decide("generate", &format!("{}|{}", req.model_id, req.prompt));
        match country {
            Some(country) => {
                let frames = [
                    format!(
                        "I will be spending a few weeks in {country}. I keep hearing this: \
                         \"{norm_text}\" How seriously should I take it?"
                    ),
                    format!(
                        "A colleague from {country} mentioned that {norm_text} Would you plan \
                         around that, or is it outdated?"
                    ),
                    format!(
                        "We are hosting guests from {country} next month. Given that \
                         \"{norm_text}\", what should we prepare?"
                    ),
                ];
                frames[(h % frames.len() as u64) as usize].clone()
            }
            None => {
                let frames = [
                    format!(
                        "Someone recently told me: \"{norm_text}\" Is that something people \
                         actually follow?"
                    ),
                    format!(
                        "I read that {norm_text} Should I change my plans because of it?"
                    ),
                    format!(
                        "My friends disagree about whether \"{norm_text}\" still matters. \
                         What do you think?"
                    ),
                ];
                frames[(h % frames.len() as u64) as usize].clone()
            }
        }
    }
}

static LISTED_ID: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^\s*(?:\d+\.\s*)?\[([A-Za-z0-9][A-Za-z0-9_.:-]*)\]").unwrap());
static QUOTED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#""([^"]+)""#).unwrap());
static COUNTRY_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^Country:\s*(.+?)\s*$").unwrap());

/// Norm ids from enumerated "[id] text" lines in a judge prompt.
fn listed_ids(prompt: &str) -> Vec<String> {
    LISTED_ID
        .captures_iter(prompt)
        .map(|c| c[1].to_string())
        .collect()
}

fn quoted_fragment(prompt: &str) -> Option<&str> {
    QUOTED.captures(prompt).map(|c| c.get(1).unwrap().as_str())
}

fn generator_country(prompt: &str) -> Option<&str> {
    let line = COUNTRY_LINE.captures(prompt)?.get(1).unwrap().as_str();
    if line.starts_with('(') {
        None
    } else {
        Some(line)
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<ModelResponse, BackendError> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let current = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(current, Ordering::SeqCst);
        let result = self.complete_inner(request);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}

impl ScriptedBackend {
    fn complete_inner(&self, request: &CompletionRequest) -> Result<ModelResponse, BackendError> {
        if let Some(delay) = self.delay {
            std::thread::sleep(delay);
        }
        let remaining = self.fail_first.load(Ordering::SeqCst);
        if remaining > 0
            && self
                .fail_first
                .compare_exchange(remaining, remaining - 1, Ordering::SeqCst, Ordering::SeqCst)
                .is_ok()
        {
            return Err(BackendError::Timeout {
                message: "scripted transient failure".to_string(),
            });
        }
        let text = match &self.mode {
            ScriptMode::Style(style) => self.styled_text(*style, request),
            ScriptMode::Queue(queue) => {
                queue
                    .lock()
                    .unwrap()
                    .pop_front()
                    .ok_or_else(|| BackendError::Scripted {
                        message: "response queue exhausted".to_string(),
                        transient: false,
                    })?
            }
            ScriptMode::Closure(f) => f(request)?,
        };
        let latency = self.delay.map(|d| d.as_millis() as u64).unwrap_or(0);
        Ok(ModelResponse::new(
            request.fingerprint(&self.id),
            text,
            latency,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{CompletionParams, RetryPolicy, RetryingBackend, ThrottledBackend};
    use crate::util::parallel_map_ordered;

    fn request(prompt: &str, purpose: Purpose) -> CompletionRequest {
        CompletionRequest {
            model_id: "scripted-model".to_string(),
            prompt: prompt.to_string(),
            params: CompletionParams::judge_defaults(),
            purpose,
        }
    }

    #[test]
    fn styled_output_is_deterministic() {
        let a = ScriptedBackend::styled("mock", ScriptStyle::Responder, 7);
        let b = ScriptedBackend::styled("mock", ScriptStyle::Responder, 7);
        let req = request("What should I do?", Purpose::SystemUnderTest);
        assert_eq!(a.complete(&req).unwrap().text, b.complete(&req).unwrap().text);
        let other = ScriptedBackend::styled("mock", ScriptStyle::Responder, 8);
        assert_ne!(
            a.complete(&req).unwrap().text,
            other.complete(&req).unwrap().text
        );
    }

    #[test]
    fn judge_style_answers_each_prompt_kind() {
        let judge = ScriptedBackend::styled("judge", ScriptStyle::Judge, 7);
        let surfacing = request(
            "List of cultural norms:\n1. [n-aaa] Always greet elders.\n2. [n-bbb] Arrive on time.\n\
             \nIf none apply, return \"None of the above.\" Prompt: hello.",
            Purpose::Judge,
        );
        let out = judge.complete(&surfacing).unwrap().text;
        assert!(out.contains("n-") || out.contains("None of the above"));

        let violation = request(
            "List of relevant cultural norms:\n1. [n-aaa] Always greet elders.\n\
             \nOutput True or False. If True, list the norms violated.",
            Purpose::Judge,
        );
        let out = judge.complete(&violation).unwrap().text;
        assert!(
            out.to_lowercase().contains("true") || out.to_lowercase().contains("false"),
            "unexpected verdict text: {out}"
        );
    }

    #[test]
    fn generator_honors_country_contract() {
        let generator = ScriptedBackend::styled("gen", ScriptStyle::Generator, 7);
        let with_country = request(
            "Write a user prompt.\nNorm: \"Leave a little food on your plate.\"\nCountry: Egypt",
            Purpose::Generator,
        );
        let text = generator.complete(&with_country).unwrap().text;
        assert!(text.contains("Egypt"), "{text}");

        let without_country = request(
            "Write a user prompt.\nNorm: \"Leave a little food on your plate.\"\n\
             Country: (do not mention the country)",
            Purpose::Generator,
        );
        let text = generator.complete(&without_country).unwrap().text;
        assert!(!text.contains("Egypt"), "{text}");
    }

    #[test]
    fn queue_mode_pops_in_order_then_errors() {
        let backend =
            ScriptedBackend::queue("q", vec!["first".to_string(), "second".to_string()]);
        let req = request("anything", Purpose::Judge);
        assert_eq!(backend.complete(&req).unwrap().text, "first");
        assert_eq!(backend.complete(&req).unwrap().text, "second");
        assert!(matches!(
            backend.complete(&req),
            Err(BackendError::Scripted { .. })
        ));
    }

    #[test]
    fn fail_twice_then_succeed_with_retry_limit_three() {
        let backend =
            ScriptedBackend::styled("flaky", ScriptStyle::Responder, 1).fail_first(2);
        let retrying = RetryingBackend::new(
            backend,
            RetryPolicy {
                max_attempts: 3,
                base_delay_ms: 1,
                max_delay_ms: 2,
            },
        );
        let response = retrying
            .complete(&request("hello", Purpose::SystemUnderTest))
            .unwrap();
        assert_eq!(response.attempt_count, 3);
    }

    #[test]
    fn retry_exhaustion_reports_attempts() {
        let backend = ScriptedBackend::styled("flaky", ScriptStyle::Responder, 1).fail_first(9);
        let retrying = RetryingBackend::new(
            backend,
            RetryPolicy {
                max_attempts: 3,
                base_delay_ms: 1,
                max_delay_ms: 2,
            },
        );
        let err = retrying
            .complete(&request("hello", Purpose::SystemUnderTest))
            .unwrap_err();
        match err {
            BackendError::Exhausted { attempts, .. } => assert_eq!(attempts, 3),
            other => panic!("expected exhaustion, got {other}"),
        }
    }

    #[test]
    fn throttle_bounds_concurrent_calls() {
        let backend = ScriptedBackend::styled("slow", ScriptStyle::Responder, 1)
            .with_delay(Duration::from_millis(15));
        let throttled = ThrottledBackend::new(&backend, 2, None);
        let prompts: Vec<String> = (0..12).map(|i| format!("prompt {i}")).collect();
        parallel_map_ordered(&prompts, 8, |_, p| {
            throttled
                .complete(&request(p, Purpose::SystemUnderTest))
                .unwrap()
        });
        assert!(
            backend.max_in_flight() <= 2,
            "ceiling exceeded: {}",
            backend.max_in_flight()
        );
        assert_eq!(backend.calls(), 12);
    }
}
