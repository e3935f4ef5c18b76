//! Chat-completion providers: the wire format, an HTTP client, a
//! deterministic mock and retry with exponential backoff.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{CaptionError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
    /// Base64 PNG attachment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_png_base64: Option<String>,
}

impl Message {
    pub fn user(text: &str) -> Self {
        Self {
            role: Role::User,
            content: text.to_string(),
            image_png_base64: None,
        }
    }

    pub fn assistant(text: &str) -> Self {
        Self {
            role: Role::Assistant,
            content: text.to_string(),
            image_png_base64: None,
        }
    }

    pub fn user_with_image(text: &str, png: &[u8]) -> Self {
        Self {
            image_png_base64: Some(base64::engine::general_purpose::STANDARD.encode(png)),
            ..Self::user(text)
        }
    }

    pub fn image_bytes(&self) -> Option<Vec<u8>> {
        self.image_png_base64
            .as_ref()
            .and_then(|b| base64::engine::general_purpose::STANDARD.decode(b).ok())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f32,
    pub messages: Vec<Message>,
}

impl ChatRequest {
    /// Hex SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serializable")))
    }

    pub fn last_user_text(&self) -> Option<&str> {
        self.messages.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str())
    }

    /// The generic chat-completions body; images ride along as data URLs.
    pub fn to_wire(&self) -> Value {
        let messages: Vec<Value> = self
            .messages
            .iter()
            .map(|m| match &m.image_png_base64 {
                None => json!({ "role": m.role, "content": m.content }),
                Some(b64) => json!({
                    "role": m.role,
                    "content": [
                        { "type": "text", "text": m.content },
                        { "type": "image_url", "image_url": { "url": format!("data:image/png;base64,{b64}") } }
                    ]
                }),
            })
            .collect();
        json!({ "model": self.model, "temperature": self.temperature, "messages": messages })
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error, Serialize, Deserialize)]
pub enum ProviderError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("status {0}: {1}")]
    Status(u16, String),
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Transport(_) => true,
            ProviderError::Status(code, _) => *code == 429 || *code >= 500,
            ProviderError::Malformed(_) => false,
        }
    }
}

pub trait Provider: Send + Sync {
    /// Short identifier recorded with every output.
    fn name(&self) -> String;
    fn model(&self) -> &str;
    fn temperature(&self) -> f32 {
        0.0
    }
    fn complete(&self, req: &ChatRequest) -> std::result::Result<String, ProviderError>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub temperature: f32,
}

fn default_timeout() -> u64 {
    60
}
fn default_retries() -> u32 {
    3
}
fn default_concurrency() -> usize {
    4
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.concurrency == 0 {
            return Err(CaptionError::Config("concurrency must be at least 1".into()));
        }
        if self.endpoint.is_empty() || self.model.is_empty() {
            return Err(CaptionError::Config("endpoint and model are required".into()));
        }
        Ok(())
    }
}

/// Provider configuration for the three stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvidersConfig {
    pub caption: ProviderConfig,
    pub simplify: ProviderConfig,
    pub fuse: ProviderConfig,
}

impl ProvidersConfig {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        for c in [&cfg.caption, &cfg.simplify, &cfg.fuse] {
            c.validate()?;
        }
        Ok(cfg)
    }
}

/// Counting semaphore capping in-flight requests.
#[derive(Debug)]
pub struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            free: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    pub fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut free = self.free.lock().expect("semaphore poisoned");
            while *free == 0 {
                free = self.cv.wait(free).expect("semaphore poisoned");
            }
            *free -= 1;
        }
        let out = f();
        *self.free.lock().expect("semaphore poisoned") += 1;
        self.cv.notify_one();
        out
    }
}

/// Blocking HTTP chat-completions client.
pub struct HttpProvider {
    cfg: ProviderConfig,
    agent: ureq::Agent,
    token: Option<String>,
    gate: Semaphore,
}

impl HttpProvider {
    pub fn new(cfg: ProviderConfig) -> Result<Self> {
        cfg.validate()?;
        let token = match &cfg.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| CaptionError::Config(format!("environment variable {var} is not set")))?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            gate: Semaphore::new(cfg.concurrency),
            cfg,
            agent,
            token,
        })
    }

    fn send(&self, req: &ChatRequest) -> std::result::Result<String, ProviderError> {
        let mut call = self.agent.post(&self.cfg.endpoint).header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            call = call.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = call
            .send_json(req.to_wire())
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        if status >= 400 {
            return Err(ProviderError::Status(status, body));
        }
        parse_completion(&body)
    }
}

/// Extracts `choices[0].message.content` from a chat-completions response.
pub fn parse_completion(body: &str) -> std::result::Result<String, ProviderError> {
    let v: Value = serde_json::from_str(body).map_err(|e| ProviderError::Malformed(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(|s| s.trim().to_string())
        .ok_or_else(|| ProviderError::Malformed(format!("no choices[0].message.content in {body}")))
}

impl Provider for HttpProvider {
    fn name(&self) -> String {
        format!("http:{}", self.cfg.endpoint)
    }

    fn model(&self) -> &str {
        &self.cfg.model
    }

    fn temperature(&self) -> f32 {
        self.cfg.temperature
    }

    fn complete(&self, req: &ChatRequest) -> std::result::Result<String, ProviderError> {
        self.gate.run(|| self.send(req))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `k` (0-based): `base·2^k`, capped.
    pub fn delay(&self, k: u32) -> Duration {
        let ms = self.base_delay_ms.saturating_mul(1u64 << k.min(32));
        Duration::from_millis(ms.min(self.max_delay_ms))
    }
}

/// Outcome of a request with retries.
#[derive(Clone, Debug, PartialEq)]
pub struct Attempted<T> {
    pub result: std::result::Result<T, ProviderError>,
    /// Total calls made, at least 1.
    pub attempts: u32,
}

pub fn complete_with_retry(provider: &dyn Provider, req: &ChatRequest, policy: &RetryPolicy) -> Attempted<String> {
    let mut attempts = 0;
    loop {
        attempts += 1;
        match provider.complete(req) {
            Ok(text) => {
                if attempts > 1 {
                    log::info!("{} succeeded after {} retries", provider.name(), attempts - 1);
                }
                return Attempted { result: Ok(text), attempts };
            }
            Err(e) if e.is_retryable() && attempts <= policy.max_retries => {
                let wait = policy.delay(attempts - 1);
                log::warn!("{} failed ({e}); retry {} in {:?}", provider.name(), attempts, wait);
                thread::sleep(wait);
            }
            Err(e) => return Attempted { result: Err(e), attempts },
        }
    }
}
