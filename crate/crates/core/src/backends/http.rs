//! Live HTTP backend speaking the common chat-completions JSON shape.
//! Provider differences are confined to base URL, path, and auth header.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backends::{Backend, CompletionRequest, ModelResponse};
use crate::error::BackendError;

/// Connection settings for one provider endpoint. Credentials are read from
/// the named environment variable, never stored in config files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    pub id: String,
    /// e.g. "https://api.example.com"
    pub base_url: String,
    /// Request path; the common chat-completions path by default.
    #[serde(default = "default_path")]
    pub path: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    /// Header carrying the key. `None` sends `Authorization: Bearer <key>`;
    /// `Some(name)` sends `<name>: <key>`.
    #[serde(default)]
    pub auth_header: Option<String>,
    /// Extra static headers, e.g. a provider version pin.
    #[serde(default)]
    pub extra_headers: Vec<(String, String)>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_path() -> String {
    "/v1/chat/completions".to_string()
}

fn default_timeout_secs() -> u64 {
    60
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var(&config.api_key_env).map_err(|_| BackendError::Auth {
            backend: config.id.clone(),
            message: format!("environment variable {} is not set", config.api_key_env),
        })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport {
                message: e.to_string(),
            })?;
        Ok(HttpBackend {
            config,
            api_key,
            client,
        })
    }

    fn url(&self) -> String {
        format!(
            "{}{}",
            self.config.base_url.trim_end_matches('/'),
            self.config.path
        )
    }
}

#[derive(Deserialize)]
struct ChatCompletionBody {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.config.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<ModelResponse, BackendError> {
        request.validate()?;
        let mut body = json!({
            "model": request.model_id,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.params.max_output_tokens,
        });
        if let Some(t) = request.params.temperature {
            body["temperature"] = json!(t);
        }

        let mut http = self.client.post(self.url()).json(&body);
        http = match &self.config.auth_header {
            None => http.bearer_auth(&self.api_key),
            Some(header) => http.header(header.as_str(), self.api_key.as_str()),
        };
        for (name, value) in &self.config.extra_headers {
            http = http.header(name.as_str(), value.as_str());
        }

        let started = Instant::now();
        let result = http.send();
        let latency_ms = started.elapsed().as_millis() as u64;

        let response = result.map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout {
                    message: e.to_string(),
                }
            } else {
                BackendError::Transport {
                    message: e.to_string(),
                }
            }
        })?;

        let status = response.status().as_u16();
        let text = response.text().map_err(|e| BackendError::Transport {
            message: e.to_string(),
        })?;
        match status {
            200..=299 => {}
            401 | 403 => {
                return Err(BackendError::Auth {
                    backend: self.config.id.clone(),
                    message: snippet(&text),
                })
            }
            429 => {
                return Err(BackendError::RateLimited {
                    message: snippet(&text),
                })
            }
            _ => {
                return Err(BackendError::Api {
                    status,
                    message: snippet(&text),
                })
            }
        }

        let parsed: ChatCompletionBody =
            serde_json::from_str(&text).map_err(|e| BackendError::Api {
                status,
                message: format!("unexpected response shape: {e}; body: {}", snippet(&text)),
            })?;
        let content = parsed
            .choices
            .first()
            .and_then(|c| c.message.content.clone())
            .unwrap_or_default();
        Ok(ModelResponse::new(
            request.fingerprint(&self.config.id),
            content,
            latency_ms,
        ))
    }
}

fn snippet(text: &str) -> String {
    let trimmed = text.trim();
    if trimmed.len() <= 300 {
        trimmed.to_string()
    } else {
        format!("{}...", &trimmed[..300])
    }
}
