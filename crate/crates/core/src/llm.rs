//! HTTP backends for OpenAI-compatible chat-completion and embedding APIs.

use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::embedding::{EmbedError, EmbeddingProvider};
use crate::grader::{BackendError, GraderBackend, DEFAULT_TEMPERATURE};

pub const DEFAULT_API_KEY_VAR: &str = "GUIDE_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpSettings {
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for HttpSettings {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            temperature: DEFAULT_TEMPERATURE,
            timeout_secs: 120,
            max_retries: 4,
            backoff_ms: 500,
        }
    }
}

/// Shared request machinery: bearer auth, retries on 429 and 5xx with
/// exponential backoff, and key redaction in logs.
#[derive(Debug, Clone)]
struct Endpoint {
    client: Client,
    settings: HttpSettings,
    api_key: Option<String>,
}

impl Endpoint {
    fn new(settings: HttpSettings, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(settings.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self { client, settings, api_key })
    }

    fn redact(&self, text: &str) -> String {
        match &self.api_key {
            Some(k) if !k.is_empty() => text.replace(k.as_str(), "[REDACTED]"),
            _ => text.to_owned(),
        }
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let url = format!("{}/{path}", self.settings.base_url.trim_end_matches('/'));
        let mut attempt = 0;
        loop {
            log::debug!("POST {url} {}", self.redact(&body.to_string()));
            let mut req = self.client.post(&url).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let retryable = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().map_err(|e| BackendError::Transport(self.redact(&e.to_string())))?;
                    log::debug!("{status} {}", self.redact(&text));
                    if status.is_success() {
                        return serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()));
                    }
                    if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
                        return Err(BackendError::Credentials(format!("{status}")));
                    }
                    let err = BackendError::Status { status: status.as_u16(), body: self.redact(&text) };
                    if status != StatusCode::TOO_MANY_REQUESTS && !status.is_server_error() {
                        return Err(err);
                    }
                    err
                }
                Err(e) => BackendError::Transport(self.redact(&e.to_string())),
            };
            if attempt >= self.settings.max_retries {
                return Err(retryable);
            }
            let wait = self.settings.backoff_ms.saturating_mul(1 << attempt.min(16));
            log::warn!("request to {url} failed ({retryable}); retrying in {wait} ms");
            thread::sleep(Duration::from_millis(wait));
            attempt += 1;
        }
    }
}

/// Chat-completion grader backend.
#[derive(Debug, Clone)]
pub struct ChatBackend {
    endpoint: Endpoint,
}

impl ChatBackend {
    pub fn new(settings: HttpSettings, api_key: Option<String>) -> Result<Self, BackendError> {
        Ok(Self { endpoint: Endpoint::new(settings, api_key)? })
    }
}

impl GraderBackend for ChatBackend {
    fn model(&self) -> &str {
        &self.endpoint.settings.model
    }

    fn temperature(&self) -> f64 {
        self.endpoint.settings.temperature
    }

    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let body = json!({
            "model": self.endpoint.settings.model,
            "temperature": self.endpoint.settings.temperature,
            "messages": [{"role": "user", "content": prompt}],
        });
        let resp = self.endpoint.post("chat/completions", &body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))
    }
}

/// Embedding provider backed by an `/embeddings` endpoint.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    endpoint: Endpoint,
    id: String,
}

impl HttpEmbedder {
    pub fn new(settings: HttpSettings, api_key: Option<String>) -> Result<Self, BackendError> {
        let id = format!("http:{}", settings.model);
        Ok(Self { endpoint: Endpoint::new(settings, api_key)?, id })
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let body = json!({"model": self.endpoint.settings.model, "input": text});
        let resp = self.endpoint.post("embeddings", &body).map_err(|e| EmbedError::Provider(e.to_string()))?;
        let values = resp
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbedError::Provider("missing data[0].embedding".into()))?;
        values
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| EmbedError::Provider("non-numeric embedding entry".into())))
            .collect()
    }
}
