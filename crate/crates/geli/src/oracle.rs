//! Chat-completion oracle over HTTP.

use std::time::Duration;

use geli_core::decompose::{ChatOracle, ChatRequest, OracleConfig, OracleError};
use serde_json::{json, Value};

use crate::error::{Error, Result};

pub const API_KEY_VAR: &str = "GELI_LLM_API_KEY";

/// POSTs `{model, temperature, messages}` and returns the first choice's
/// message content. The key is sent as a bearer token and never printed.
#[derive(Clone)]
pub struct HttpOracle {
    agent: ureq::Agent,
    endpoint: String,
    api_key: String,
}

impl std::fmt::Debug for HttpOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpOracle")
            .field("endpoint", &self.endpoint)
            .field("api_key", &"<redacted>")
            .finish()
    }
}

impl HttpOracle {
    pub fn new(cfg: &OracleConfig, api_key: String) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            endpoint: cfg.endpoint_url.clone(),
            api_key,
        }
    }

    /// Reads the key from the environment.
    pub fn from_env(cfg: &OracleConfig) -> Result<Self> {
        match std::env::var(API_KEY_VAR) {
            Ok(key) if !key.is_empty() => Ok(Self::new(cfg, key)),
            _ => Err(Error::MissingApiKey(API_KEY_VAR)),
        }
    }
}

fn body(request: &ChatRequest) -> Value {
    json!({
        "model": request.model,
        "temperature": request.temperature,
        "messages": request.messages,
    })
}

/// Pulls `choices[0].message.content` out of a response body.
pub fn extract_content(text: &str) -> Result<String, OracleError> {
    let v: Value = serde_json::from_str(text).map_err(|e| OracleError::Protocol(format!("response is not JSON: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| OracleError::Protocol("response has no choices[0].message.content".into()))
}

impl ChatOracle for HttpOracle {
    fn complete(&mut self, request: &ChatRequest) -> Result<String, OracleError> {
        let mut response = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body(request))
            .map_err(|e| OracleError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| OracleError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(OracleError::Status { status, body: text });
        }
        extract_content(&text)
    }

    fn backoff(&mut self, delay: Duration) {
        std::thread::sleep(delay);
    }
}
