//! Chat-completion backends: an OpenAI-compatible HTTP endpoint or a
//! deterministic mock.
//!
//! The client bounds in-flight requests with a semaphore of
//! `max_concurrency` permits. A [`Slot`] holds one permit across several
//! sequential completions, which is how both stages of a spatial prefix
//! prompt share a single slot.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tokio::sync::{Semaphore, SemaphorePermit};

use crate::prompting::ChatTranscript;

/// Bearer token for HTTP backends. Never read from config files.
pub const API_KEY_ENV: &str = "TRAJLAB_API_KEY";

/// What mocks answer to a prefix question when no script entry exists.
pub const MOCK_PREFIX_REPLY: &str = "Understood.";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("backend unavailable after {attempts} attempts: {last_error}")]
    BackendUnavailable { attempts: u32, last_error: String },
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("mock script has no entry for `{0}`")]
    ScriptGap(String),
    #[error("oracle mock needs the gold answer for `{0}`")]
    MissingOracle(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    /// First backoff delay; later ones double.
    #[serde(default = "default_retry_base")]
    pub retry_base_ms: u64,
}

fn default_retries() -> u32 {
    3
}

fn default_timeout() -> u64 {
    60
}

fn default_concurrency() -> usize {
    4
}

fn default_retry_base() -> u64 {
    1000
}

impl BackendConfig {
    pub fn mock(model_name: impl Into<String>) -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            base_url: None,
            model_name: model_name.into(),
            temperature: 0.0,
            max_retries: default_retries(),
            timeout_secs: default_timeout(),
            max_concurrency: default_concurrency(),
            retry_base_ms: default_retry_base(),
        }
    }

    pub fn http(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        BackendConfig {
            kind: BackendKind::Http,
            base_url: Some(base_url.into()),
            ..Self::mock(model_name)
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.kind == BackendKind::Http && self.base_url.as_deref().is_none_or(|u| u.trim().is_empty()) {
            return Err(LlmError::InvalidConfig("http backend needs base_url".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::InvalidConfig("temperature must be >= 0".into()));
        }
        if self.max_concurrency < 1 {
            return Err(LlmError::InvalidConfig("max_concurrency must be >= 1".into()));
        }
        if self.model_name.trim().is_empty() {
            return Err(LlmError::InvalidConfig("model_name is empty".into()));
        }
        Ok(())
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.retry_base_ms.saturating_mul(1u64 << (attempt - 1).min(20));
        let jitter = if base >= 4 {
            rand::rng().random_range(0..=base / 4)
        } else {
            0
        };
        Duration::from_millis(base + jitter)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MockPolicy {
    /// Fixed reply per instance id; prefix stages look up `<id>#prefix`.
    Scripted(BTreeMap<String, String>),
    FixedLabel(String),
    /// Replies with the gold answer supplied on the request.
    OracleEcho,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prefix,
    Main,
}

#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub instance_id: &'a str,
    pub transcript: &'a ChatTranscript,
    pub stage: Stage,
    /// Gold answer text, consulted only by the oracle mock.
    pub oracle: Option<&'a str>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub latency_ms: u64,
    pub backend: String,
    pub attempt: u32,
}

enum Backend {
    Http {
        client: reqwest::Client,
        url: String,
        api_key: Option<String>,
    },
    Mock(MockPolicy),
}

pub struct LlmClient {
    cfg: BackendConfig,
    backend: Backend,
    slots: Semaphore,
    calls: AtomicU64,
}

/// One held concurrency permit.
pub struct Slot<'a> {
    client: &'a LlmClient,
    _permit: SemaphorePermit<'a>,
}

impl Slot<'_> {
    pub async fn complete(&self, req: CompletionRequest<'_>) -> Result<ModelResponse, LlmError> {
        self.client.dispatch(req).await
    }
}

impl LlmClient {
    /// `mock` is required for mock backends and ignored for HTTP ones.
    pub fn new(cfg: BackendConfig, mock: Option<MockPolicy>) -> Result<Self, LlmError> {
        cfg.validate()?;
        let backend = match cfg.kind {
            BackendKind::Http => {
                let client = reqwest::Client::builder()
                    .timeout(Duration::from_secs(cfg.timeout_secs))
                    .build()
                    .map_err(|e| LlmError::InvalidConfig(e.to_string()))?;
                let base = cfg.base_url.as_deref().unwrap_or_default().trim_end_matches('/');
                Backend::Http {
                    client,
                    url: format!("{base}/chat/completions"),
                    api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
                }
            }
            BackendKind::Mock => Backend::Mock(
                mock.ok_or_else(|| LlmError::InvalidConfig("mock backend needs a mock policy".into()))?,
            ),
        };
        Ok(LlmClient {
            slots: Semaphore::new(cfg.max_concurrency),
            cfg,
            backend,
            calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    /// Completions dispatched so far (one per request, however many retries).
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub async fn slot(&self) -> Slot<'_> {
        Slot {
            client: self,
            _permit: self.slots.acquire().await.expect("semaphore is never closed"),
        }
    }

    pub async fn complete(&self, req: CompletionRequest<'_>) -> Result<ModelResponse, LlmError> {
        self.slot().await.complete(req).await
    }

    async fn dispatch(&self, req: CompletionRequest<'_>) -> Result<ModelResponse, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match &self.backend {
            Backend::Mock(policy) => self.mock_complete(policy, req),
            Backend::Http { client, url, api_key } => {
                self.http_complete(client, url, api_key.as_deref(), req).await
            }
        }
    }

    fn mock_complete(&self, policy: &MockPolicy, req: CompletionRequest<'_>) -> Result<ModelResponse, LlmError> {
        let text = match (policy, req.stage) {
            (MockPolicy::Scripted(map), Stage::Main) => map
                .get(req.instance_id)
                .cloned()
                .ok_or_else(|| LlmError::ScriptGap(req.instance_id.to_string()))?,
            (MockPolicy::Scripted(map), Stage::Prefix) => map
                .get(&format!("{}#prefix", req.instance_id))
                .cloned()
                .unwrap_or_else(|| MOCK_PREFIX_REPLY.to_string()),
            (MockPolicy::FixedLabel(label), _) => label.clone(),
            (MockPolicy::OracleEcho, Stage::Prefix) => MOCK_PREFIX_REPLY.to_string(),
            (MockPolicy::OracleEcho, Stage::Main) => req
                .oracle
                .ok_or_else(|| LlmError::MissingOracle(req.instance_id.to_string()))?
                .to_string(),
        };
        Ok(ModelResponse {
            text,
            latency_ms: 0,
            backend: self.cfg.model_name.clone(),
            attempt: 1,
        })
    }

    async fn http_complete(
        &self,
        client: &reqwest::Client,
        url: &str,
        api_key: Option<&str>,
        req: CompletionRequest<'_>,
    ) -> Result<ModelResponse, LlmError> {
        let body = json!({
            "model": self.cfg.model_name,
            "temperature": self.cfg.temperature,
            "messages": req.transcript.messages,
        });
        let mut attempt = 0;
        loop {
            attempt += 1;
            let started = Instant::now();
            let mut request = client.post(url).json(&body);
            if let Some(key) = api_key {
                request = request.bearer_auth(key);
            }
            let retryable = match request.send().await {
                Ok(resp) if resp.status().is_success() => {
                    let value: serde_json::Value = resp
                        .json()
                        .await
                        .map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
                    let text = value
                        .pointer("/choices/0/message/content")
                        .and_then(|v| v.as_str())
                        .ok_or_else(|| {
                            LlmError::MalformedResponse("missing choices[0].message.content".into())
                        })?;
                    return Ok(ModelResponse {
                        text: text.to_string(),
                        latency_ms: started.elapsed().as_millis() as u64,
                        backend: self.cfg.model_name.clone(),
                        attempt,
                    });
                }
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().await.unwrap_or_default();
                    if status.as_u16() == 429 || status.is_server_error() {
                        format!("HTTP {}: {}", status.as_u16(), text)
                    } else {
                        return Err(LlmError::Status {
                            status: status.as_u16(),
                            body: text,
                        });
                    }
                }
                Err(e) => format!("transport: {e}"),
            };
            if attempt > self.cfg.max_retries {
                return Err(LlmError::BackendUnavailable {
                    attempts: attempt,
                    last_error: retryable,
                });
            }
            let delay = self.cfg.backoff(attempt);
            tracing::warn!(instance = req.instance_id, attempt, ?delay, "retrying: {retryable}");
            tokio::time::sleep(delay).await;
        }
    }
}
