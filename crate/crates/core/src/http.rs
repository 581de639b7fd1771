//! Blocking client for chat-completion style endpoints, shared by the remote
//! extractor and the remote generation backend.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed completion response: {0}")]
    Response(String),
}

impl HttpError {
    pub fn is_transport(&self) -> bool {
        matches!(self, Self::Transport { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CompletionOptions {
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub seed: Option<u64>,
}

/// Caps the number of requests in flight at once.
#[derive(Debug)]
pub struct InflightLimiter {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

pub struct InflightPermit<'a> {
    limiter: &'a InflightLimiter,
}

impl InflightLimiter {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InflightPermit<'_> {
        let mut active = self.active.lock().unwrap();
        while *active >= self.max {
            active = self.freed.wait(active).unwrap();
        }
        *active += 1;
        InflightPermit { limiter: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.active.lock().unwrap()
    }
}

impl Drop for InflightPermit<'_> {
    fn drop(&mut self) {
        let mut active = self.limiter.active.lock().unwrap();
        *active -= 1;
        self.limiter.freed.notify_one();
    }
}

#[derive(Debug, Clone)]
pub struct ClientSettings {
    pub endpoint: String,
    pub token: Option<String>,
    pub timeout: Duration,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// First retry delay; doubles on each further attempt.
    pub backoff: Duration,
}

pub struct ChatClient {
    agent: ureq::Agent,
    settings: ClientSettings,
    limiter: InflightLimiter,
}

impl ChatClient {
    pub fn new(settings: ClientSettings) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(settings.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            limiter: InflightLimiter::new(settings.max_in_flight),
            settings,
        }
    }

    pub fn settings(&self) -> &ClientSettings {
        &self.settings
    }

    /// Posts `messages` and returns the first choice's content. Transport
    /// failures, 429 and 5xx responses are retried with exponential backoff.
    pub fn complete(&self, messages: &[ChatMessage], opts: &CompletionOptions) -> Result<String, HttpError> {
        let mut body = json!({ "messages": messages });
        if let Some(model) = &opts.model {
            body["model"] = json!(model);
        }
        if let Some(t) = opts.temperature {
            body["temperature"] = json!(t);
        }
        if let Some(n) = opts.max_tokens {
            body["max_tokens"] = json!(n);
        }
        if let Some(seed) = opts.seed {
            body["seed"] = json!(seed);
        }

        let attempts = self.settings.max_retries + 1;
        let mut last = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(self.settings.backoff * 2u32.saturating_pow(attempt - 1));
            }
            match self.post_once(&body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Retry(message)) => last = Some(message),
                Err(Attempt::Fatal(err)) => return Err(err),
            }
        }
        Err(HttpError::Transport {
            attempts,
            message: last.unwrap_or_default(),
        })
    }

    fn post_once(&self, body: &Value) -> Result<String, Attempt> {
        let _permit = self.limiter.acquire();
        let mut req = self
            .agent
            .post(&self.settings.endpoint)
            .header("Content-Type", "application/json");
        if let Some(token) = &self.settings.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let resp = req
            .send_json(body)
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .into_body()
            .read_to_string()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("status {status}")));
        }
        if !(200..300).contains(&status) {
            return Err(Attempt::Fatal(HttpError::Status {
                status,
                body: excerpt(&text, 200),
            }));
        }
        completion_text(&text).map_err(Attempt::Fatal)
    }
}

enum Attempt {
    Retry(String),
    Fatal(HttpError),
}

/// Extracts `choices[0].message.content` from a completion response body.
pub fn completion_text(body: &str) -> Result<String, HttpError> {
    let value: Value = serde_json::from_str(body).map_err(|e| HttpError::Response(e.to_string()))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| HttpError::Response(format!("no choices[0].message.content in {}", excerpt(body, 120))))
}

pub(crate) fn excerpt(text: &str, max_chars: usize) -> String {
    let mut out: String = text.chars().take(max_chars).collect();
    if text.chars().count() > max_chars {
        out.push('…');
    }
    out
}
