//! Chat-completion client for text-generation services.
//!
//! Speaks the common `POST {endpoint}` JSON shape with `model`, `messages`
//! (system/user roles) and `temperature`, reading
//! `choices[0].message.content` from the reply.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{AuditError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }
}

/// Anything that turns a chat transcript into one reply.
pub trait TextService: Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String>;

    /// Upper bound on in-flight requests.
    fn max_concurrency(&self) -> usize {
        1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenServiceConfig {
    pub endpoint: String,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    /// Name of an environment variable holding a bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
}

fn default_model() -> String {
    "default".into()
}
fn default_concurrency() -> usize {
    4
}
fn default_timeout() -> f64 {
    120.0
}
fn default_retries() -> u32 {
    3
}

impl GenServiceConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        GenServiceConfig {
            endpoint: endpoint.into(),
            model: default_model(),
            max_concurrency: default_concurrency(),
            timeout_secs: default_timeout(),
            retries: default_retries(),
            temperature: 0.0,
            max_tokens: None,
            api_key_env: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_concurrency < 1 {
            return Err(AuditError::Config("max_concurrency must be at least 1".into()));
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(AuditError::Config("timeout must be positive".into()));
        }
        if self.endpoint.trim().is_empty() {
            return Err(AuditError::Config("empty service endpoint".into()));
        }
        Ok(())
    }
}

pub struct HttpChatService {
    cfg: GenServiceConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl HttpChatService {
    pub fn new(cfg: GenServiceConfig) -> Result<Self> {
        cfg.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .build()
            .into();
        let api_key = cfg
            .api_key_env
            .as_deref()
            .and_then(|name| std::env::var(name).ok());
        Ok(HttpChatService {
            cfg,
            agent,
            api_key,
        })
    }

    pub fn config(&self) -> &GenServiceConfig {
        &self.cfg
    }

    fn request_body(&self, messages: &[ChatMessage]) -> serde_json::Value {
        let mut body = json!({
            "model": self.cfg.model,
            "messages": messages,
            "temperature": self.cfg.temperature,
        });
        if let Some(max) = self.cfg.max_tokens {
            body["max_tokens"] = json!(max);
        }
        body
    }

    fn attempt(&self, body: &serde_json::Value) -> std::result::Result<String, (bool, String)> {
        let mut req = self.agent.post(&self.cfg.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::StatusCode(code)) => {
                let retry = code == 429 || code >= 500;
                return Err((retry, format!("HTTP status {code}")));
            }
            Err(e) => return Err((true, e.to_string())),
        };
        let value: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| (false, format!("unreadable reply: {e}")))?;
        extract_content(&value).ok_or_else(|| (false, format!("reply without message content: {value}")))
    }
}

/// `choices[0].message.content`, or `choices[0].text` for completion-style replies.
pub fn extract_content(value: &serde_json::Value) -> Option<String> {
    let choice = value.get("choices")?.get(0)?;
    choice
        .get("message")
        .and_then(|m| m.get("content"))
        .or_else(|| choice.get("text"))
        .and_then(|c| c.as_str())
        .map(str::to_string)
}

impl TextService for HttpChatService {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        let body = self.request_body(messages);
        let mut last = String::new();
        for attempt in 0..=self.cfg.retries {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err((retry, msg)) => {
                    last = msg;
                    if !retry {
                        break;
                    }
                    if attempt < self.cfg.retries {
                        thread::sleep(Duration::from_millis(100 << attempt.min(6)));
                    }
                }
            }
        }
        Err(AuditError::Service(format!(
            "{} after {} attempt(s): {last}",
            self.cfg.endpoint,
            self.cfg.retries + 1
        )))
    }

    fn max_concurrency(&self) -> usize {
        self.cfg.max_concurrency
    }
}

/// Run `f` over `items` with at most `workers` threads in flight. Results
/// come back in input order.
pub fn map_bounded<A, T, F>(items: &[A], workers: usize, f: F) -> Vec<T>
where
    A: Sync,
    T: Send,
    F: Fn(&A) -> T + Sync,
{
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                slots.lock().expect("result slots poisoned")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|x| x.expect("every slot filled"))
        .collect()
}
