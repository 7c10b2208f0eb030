use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendTag, CaptionBackend};
use crate::{Error, Result};

/// Chat-completion client: POSTs `{"model", "messages": [system, user]}` and
/// reads `choices[0].message.content` from the reply.
#[derive(Clone, Debug)]
pub struct ServiceBackend {
    endpoint: String,
    model: String,
    token: Option<String>,
    attempts: u32,
    base_delay: Duration,
    timeout: Duration,
}

impl ServiceBackend {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            token: None,
            attempts: 3,
            base_delay: Duration::from_secs(1),
            timeout: Duration::from_secs(60),
        }
    }

    /// Bearer token sent in the `Authorization` header.
    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    /// `attempts` tries with exponential backoff starting at `base_delay`.
    pub fn with_retry(mut self, attempts: u32, base_delay: Duration) -> Self {
        self.attempts = attempts.max(1);
        self.base_delay = base_delay;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn request_once(&self, agent: &ureq::Agent, body: &str) -> std::result::Result<String, String> {
        let mut req = agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        let status = resp.status();
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        if !status.is_success() {
            return Err(format!("HTTP {}", status.as_u16()));
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| format!("response is not JSON: {e}"))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| "response lacks choices[0].message.content".to_string())
    }
}

impl CaptionBackend for ServiceBackend {
    fn tag(&self) -> BackendTag {
        BackendTag::Service
    }

    fn complete(&self, system: &str, user: &str) -> Result<String> {
        let body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        })
        .to_string();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut last = String::new();
        for attempt in 0..self.attempts {
            if attempt > 0 {
                std::thread::sleep(self.base_delay * 2u32.pow(attempt - 1));
            }
            match self.request_once(&agent, &body) {
                Ok(content) => return Ok(content),
                Err(e) => last = e,
            }
        }
        Err(Error::BackendUnavailable { attempts: self.attempts, detail: last })
    }
}
