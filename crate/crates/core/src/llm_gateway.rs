//! Completion backends: a remote chat-completion client with retries and a
//! deterministic scripted backend.

use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

/// Environment variable holding the bearer token for the remote backend.
pub const API_KEY_ENV: &str = "MEDBRAIN_API_KEY";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend returned HTTP {status}: {message}")]
    Status { status: u16, message: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("no scripted rule matches the prompt and no default response is set")]
    NoScript,
    #[error("invalid script: {0}")]
    Script(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_new_tokens: u32,
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
    pub retries: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_new_tokens: 512,
            timeout: Duration::from_secs(30),
            retries: 2,
        }
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    /// Raw continuation, untrimmed.
    pub text: String,
    pub backend_id: String,
    pub latency: Duration,
}

#[async_trait]
pub trait CompletionBackend: Send + Sync {
    fn backend_id(&self) -> &str;

    async fn complete(
        &self,
        prompt: &str,
        params: &GenerationParams,
    ) -> Result<CompletionResult, GatewayError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptMatcher {
    Contains(String),
    /// Every listed substring must occur.
    ContainsAll(Vec<String>),
    Exact(String),
}

impl PromptMatcher {
    fn matches(&self, prompt: &str) -> bool {
        match self {
            PromptMatcher::Contains(s) => prompt.contains(s.as_str()),
            PromptMatcher::ContainsAll(parts) => parts.iter().all(|p| prompt.contains(p.as_str())),
            PromptMatcher::Exact(s) => prompt == s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptRule {
    pub matcher: PromptMatcher,
    pub response: String,
}

impl ScriptRule {
    pub fn contains(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            matcher: PromptMatcher::Contains(pattern.into()),
            response: response.into(),
        }
    }

    pub fn exact(prompt: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            matcher: PromptMatcher::Exact(prompt.into()),
            response: response.into(),
        }
    }
}

/// Rule file shape (TOML):
///
/// ```toml
/// default_response = "optional"
///
/// [[rule]]
/// contains = "extract keywords"
/// response = "Mpox, PCR, test"
///
/// [[rule]]
/// contains_all = ["Select the information", "PCR"]
/// response = "..."
///
/// [[rule]]
/// exact = "How to test for Mpox?"
/// response = "..."
/// ```
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFile {
    default_response: Option<String>,
    #[serde(default, rename = "rule")]
    rules: Vec<RuleEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleEntry {
    contains: Option<String>,
    contains_all: Option<Vec<String>>,
    exact: Option<String>,
    response: String,
}

/// Resolves prompts against an ordered rule list; the first match wins.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScriptedBackend {
    rules: Vec<ScriptRule>,
    default_response: Option<String>,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>, default_response: Option<String>) -> Self {
        Self {
            rules,
            default_response,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, GatewayError> {
        let file: ScriptFile =
            toml::from_str(text).map_err(|e| GatewayError::Script(e.to_string()))?;
        let rules = file
            .rules
            .into_iter()
            .enumerate()
            .map(|(i, entry)| {
                let matcher = match (entry.contains, entry.contains_all, entry.exact) {
                    (Some(s), None, None) => PromptMatcher::Contains(s),
                    (None, Some(all), None) if !all.is_empty() => PromptMatcher::ContainsAll(all),
                    (None, None, Some(s)) => PromptMatcher::Exact(s),
                    _ => {
                        return Err(GatewayError::Script(format!(
                            "rule {} must set exactly one of `contains`, `contains_all` or `exact`",
                            i + 1
                        )))
                    }
                };
                Ok(ScriptRule {
                    matcher,
                    response: entry.response,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self::new(rules, file.default_response))
    }

    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Appends `other`'s rules after this backend's; keeps the first default.
    pub fn merge(mut self, other: ScriptedBackend) -> Self {
        self.rules.extend(other.rules);
        self.default_response = self.default_response.or(other.default_response);
        self
    }

    pub fn rules(&self) -> &[ScriptRule] {
        &self.rules
    }

    pub fn resolve(&self, prompt: &str) -> Result<&str, GatewayError> {
        self.rules
            .iter()
            .find(|r| r.matcher.matches(prompt))
            .map(|r| r.response.as_str())
            .or(self.default_response.as_deref())
            .ok_or(GatewayError::NoScript)
    }
}

#[async_trait]
impl CompletionBackend for ScriptedBackend {
    fn backend_id(&self) -> &str {
        "scripted"
    }

    async fn complete(
        &self,
        prompt: &str,
        _params: &GenerationParams,
    ) -> Result<CompletionResult, GatewayError> {
        if prompt.is_empty() {
            return Err(GatewayError::InvalidArgument("prompt is empty".into()));
        }
        let started = Instant::now();
        let text = self.resolve(prompt)?.to_string();
        Ok(CompletionResult {
            text,
            backend_id: self.backend_id().to_string(),
            latency: started.elapsed(),
        })
    }
}

/// Client for `POST {base}/v1/chat/completions`.
#[derive(Clone)]
pub struct RemoteBackend {
    base: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::Client,
    backoff_base: Duration,
    backoff_cap: Duration,
    id: String,
}

impl fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("base", &self.base)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl RemoteBackend {
    /// Reads the auth token from [`API_KEY_ENV`] when set.
    pub fn new(base: impl Into<String>, model: impl Into<String>) -> Self {
        let base = base.into().trim_end_matches('/').to_string();
        let model = model.into();
        Self {
            id: format!("remote:{model}"),
            base,
            model,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            client: reqwest::Client::new(),
            backoff_base: Duration::from_millis(500),
            backoff_cap: Duration::from_secs(4),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn with_backoff(mut self, base: Duration, cap: Duration) -> Self {
        self.backoff_base = base;
        self.backoff_cap = cap;
        self
    }

    /// Delay before retry number `attempt` (0-based): base × 2^attempt, capped.
    pub fn backoff_delay(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt);
        self.backoff_base
            .checked_mul(factor)
            .unwrap_or(self.backoff_cap)
            .min(self.backoff_cap)
    }

    async fn attempt(
        &self,
        prompt: &str,
        params: &GenerationParams,
    ) -> Result<String, (bool, GatewayError)> {
        let body = json!({
            "model": self.model,
            "temperature": params.temperature,
            "max_tokens": params.max_new_tokens,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self
            .client
            .post(format!("{}/v1/chat/completions", self.base))
            .timeout(params.timeout)
            .json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| {
            (
                true,
                GatewayError::Transport {
                    attempts: 0,
                    message: e.to_string(),
                },
            )
        })?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| {
            (
                true,
                GatewayError::Transport {
                    attempts: 0,
                    message: e.to_string(),
                },
            )
        })?;
        if !status.is_success() {
            let retryable = status.is_server_error()
                || status == reqwest::StatusCode::TOO_MANY_REQUESTS
                || status == reqwest::StatusCode::REQUEST_TIMEOUT;
            return Err((
                retryable,
                GatewayError::Status {
                    status: status.as_u16(),
                    message: text.chars().take(200).collect(),
                },
            ));
        }
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| (false, GatewayError::Protocol(e.to_string())))?;
        value
            .pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| {
                (
                    false,
                    GatewayError::Protocol("missing choices[0].message.content".into()),
                )
            })
    }
}

#[async_trait]
impl CompletionBackend for RemoteBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    async fn complete(
        &self,
        prompt: &str,
        params: &GenerationParams,
    ) -> Result<CompletionResult, GatewayError> {
        if prompt.is_empty() {
            return Err(GatewayError::InvalidArgument("prompt is empty".into()));
        }
        let started = Instant::now();
        let max_attempts = params.retries.saturating_add(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.attempt(prompt, params).await {
                Ok(text) => {
                    return Ok(CompletionResult {
                        text,
                        backend_id: self.id.clone(),
                        latency: started.elapsed(),
                    })
                }
                Err((retryable, err)) => {
                    if !retryable || attempt >= max_attempts {
                        return Err(match err {
                            GatewayError::Transport { message, .. } => GatewayError::Transport {
                                attempts: attempt,
                                message,
                            },
                            other => other,
                        });
                    }
                    let delay = self.backoff_delay(attempt - 1);
                    tracing::warn!(attempt, ?delay, error = %err, "completion attempt failed, retrying");
                    tokio::time::sleep(delay).await;
                }
            }
        }
    }
}

/// Wraps a backend and records every prompt it is asked to complete.
pub struct RecordingBackend {
    inner: Arc<dyn CompletionBackend>,
    prompts: Mutex<Vec<String>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn CompletionBackend>) -> Self {
        Self {
            inner,
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("recorder poisoned").clone()
    }

    pub fn take(&self) -> Vec<String> {
        std::mem::take(&mut *self.prompts.lock().expect("recorder poisoned"))
    }
}

#[async_trait]
impl CompletionBackend for RecordingBackend {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    async fn complete(
        &self,
        prompt: &str,
        params: &GenerationParams,
    ) -> Result<CompletionResult, GatewayError> {
        self.prompts
            .lock()
            .expect("recorder poisoned")
            .push(prompt.to_string());
        self.inner.complete(prompt, params).await
    }
}
