//! Text-generation providers used by ingestion, refinement and merging.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("no fixture completion for prompt key {key} (expected file {path})")]
    MissingFixture { key: String, path: String },
    #[error("provider call budget of {0} exhausted")]
    BudgetExhausted(usize),
    #[error("environment variable '{0}' with the provider token is not set")]
    MissingToken(String),
    #[error("provider request failed: {0}")]
    Transport(String),
    #[error("provider response malformed: {0}")]
    Response(String),
    #[error("fixture io: {0}")]
    Io(#[from] std::io::Error),
}

/// Produces a completion for a (system, user) prompt pair.
pub trait GenerationProvider {
    fn complete(&self, system: &str, user: &str) -> Result<String, ProviderError>;
}

impl<P: GenerationProvider + ?Sized> GenerationProvider for &P {
    fn complete(&self, system: &str, user: &str) -> Result<String, ProviderError> {
        (**self).complete(system, user)
    }
}

impl<P: GenerationProvider + ?Sized> GenerationProvider for Box<P> {
    fn complete(&self, system: &str, user: &str) -> Result<String, ProviderError> {
        (**self).complete(system, user)
    }
}

/// Stable key for a prompt pair; fixture files are named `<key>.txt`.
pub fn prompt_key(system: &str, user: &str) -> String {
    let mut h = Sha256::new();
    h.update(system.as_bytes());
    h.update([0x1f]);
    h.update(user.as_bytes());
    hex::encode(h.finalize())[..24].to_string()
}

/// Replays canned completions keyed by prompt hash.
///
/// Completions come from an in-memory table first and then from
/// `<dir>/<key>.txt`.
#[derive(Debug, Clone, Default)]
pub struct FixtureProvider {
    dir: Option<PathBuf>,
    entries: HashMap<String, String>,
}

impl FixtureProvider {
    pub fn new() -> Self {
        FixtureProvider::default()
    }

    pub fn from_dir(dir: impl Into<PathBuf>) -> Self {
        FixtureProvider {
            dir: Some(dir.into()),
            entries: HashMap::new(),
        }
    }

    pub fn insert(&mut self, system: &str, user: &str, completion: impl Into<String>) {
        self.entries.insert(prompt_key(system, user), completion.into());
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }
}

impl GenerationProvider for FixtureProvider {
    fn complete(&self, system: &str, user: &str) -> Result<String, ProviderError> {
        let key = prompt_key(system, user);
        if let Some(c) = self.entries.get(&key) {
            return Ok(c.clone());
        }
        let path = match &self.dir {
            Some(dir) => dir.join(format!("{key}.txt")),
            None => PathBuf::from(format!("{key}.txt")),
        };
        if self.dir.is_some() && path.is_file() {
            return Ok(std::fs::read_to_string(path)?);
        }
        Err(ProviderError::MissingFixture {
            key,
            path: path.display().to_string(),
        })
    }
}

/// Caps the number of calls made through a provider.
pub struct BudgetedProvider<P> {
    inner: P,
    budget: usize,
    used: AtomicUsize,
}

impl<P: GenerationProvider> BudgetedProvider<P> {
    pub fn new(inner: P, budget: usize) -> Self {
        BudgetedProvider {
            inner,
            budget,
            used: AtomicUsize::new(0),
        }
    }

    pub fn calls_used(&self) -> usize {
        self.used.load(Ordering::SeqCst)
    }

    pub fn budget(&self) -> usize {
        self.budget
    }
}

impl<P: GenerationProvider> GenerationProvider for BudgetedProvider<P> {
    fn complete(&self, system: &str, user: &str) -> Result<String, ProviderError> {
        let claimed = self.used.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| {
            (n < self.budget).then_some(n + 1)
        });
        if claimed.is_err() {
            return Err(ProviderError::BudgetExhausted(self.budget));
        }
        self.inner.complete(system, user)
    }
}

/// Settings for an OpenAI-style chat-completions endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default = "default_token_env")]
    pub token_env: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_token_env() -> String {
    "ASPM_API_KEY".to_string()
}

fn default_timeout_secs() -> u64 {
    120
}

/// Chat-completions client over HTTP.
pub struct RemoteProvider {
    config: RemoteConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

impl RemoteProvider {
    /// Reads the token from the configured environment variable. A missing
    /// variable is allowed for endpoints without auth.
    pub fn new(config: RemoteConfig) -> Self {
        let token = std::env::var(&config.token_env).ok();
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        RemoteProvider { config, token, agent }
    }

    pub fn request_body(&self, system: &str, user: &str) -> serde_json::Value {
        serde_json::json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        })
    }
}

/// Pulls the first choice's message content out of a chat-completions reply.
pub fn parse_chat_response(body: &serde_json::Value) -> Result<String, ProviderError> {
    body.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| ProviderError::Response("missing choices[0].message.content".into()))
}

impl GenerationProvider for RemoteProvider {
    fn complete(&self, system: &str, user: &str) -> Result<String, ProviderError> {
        let mut req = self
            .agent
            .post(&self.config.endpoint)
            .header("Content-Type", "application/json");
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(self.request_body(system, user))
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status();
        let body: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError::Response(e.to_string()))?;
        if !status.is_success() {
            return Err(ProviderError::Transport(format!("HTTP {status}: {body}")));
        }
        parse_chat_response(&body)
    }
}
