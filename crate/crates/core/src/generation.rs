//! A minimal chat-completion style HTTP contract for text generation.
//!
//! Request: `{"messages": [{"role", "content"}], "temperature", "top_p",
//! "max_tokens", "stop", "seed"}`. Response: either `{"text": "..."}` or
//! `{"choices": [{"message": {"content": "..."}}]}` / `{"choices": [{"text": "..."}]}`.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retry::{duration_ms, run_with_retries, Attempt, RetryPolicy};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.to_string(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stop: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub url: String,
    #[serde(with = "duration_ms")]
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl GenerationConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum GenerationError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("unrecognized response: {0}")]
    BadResponse(String),
}

#[derive(Debug, Clone)]
pub struct GenerationClient {
    cfg: GenerationConfig,
    http: reqwest::blocking::Client,
}

impl GenerationClient {
    pub fn new(cfg: GenerationConfig) -> Result<Self, GenerationError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| GenerationError::Transport(e.to_string()))?;
        Ok(Self { cfg, http })
    }

    pub fn config(&self) -> &GenerationConfig {
        &self.cfg
    }

    /// Sends one request, retrying transport failures and 5xx responses.
    pub fn generate(&self, req: &GenerationRequest) -> Result<String, GenerationError> {
        let (res, _) = run_with_retries(&self.cfg.retry, |_| match self.send_once(req) {
            Err(e @ GenerationError::Transport(_)) => Attempt::Retry(Err(e)),
            Err(e @ GenerationError::Http { status, .. }) if status >= 500 => {
                Attempt::Retry(Err(e))
            }
            other => Attempt::Done(other),
        });
        res
    }

    fn send_once(&self, req: &GenerationRequest) -> Result<String, GenerationError> {
        let resp = self
            .http
            .post(&self.cfg.url)
            .json(req)
            .send()
            .map_err(|e| GenerationError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .text()
            .map_err(|e| GenerationError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(GenerationError::Http { status, body });
        }
        let value: serde_json::Value =
            serde_json::from_str(&body).map_err(|e| GenerationError::BadResponse(e.to_string()))?;
        extract_text(&value)
            .ok_or_else(|| GenerationError::BadResponse(body.chars().take(200).collect()))
    }
}

pub fn extract_text(v: &serde_json::Value) -> Option<String> {
    if let Some(t) = v.get("text").and_then(|t| t.as_str()) {
        return Some(t.to_string());
    }
    let choice = v.get("choices")?.get(0)?;
    choice
        .get("message")
        .and_then(|m| m.get("content"))
        .or_else(|| choice.get("text"))
        .and_then(|t| t.as_str())
        .map(str::to_string)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn response_shapes() {
        assert_eq!(extract_text(&json!({"text": "a"})).as_deref(), Some("a"));
        assert_eq!(
            extract_text(&json!({"choices": [{"message": {"content": "b"}}]})).as_deref(),
            Some("b")
        );
        assert_eq!(
            extract_text(&json!({"choices": [{"text": "c"}]})).as_deref(),
            Some("c")
        );
        assert_eq!(extract_text(&json!({"output": 1})), None);
    }
}
