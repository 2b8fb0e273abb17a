//! Adapters for real services and wrappers around any backend.

use std::time::Duration;

#[cfg(feature = "http")]
use serde::Deserialize;

#[cfg(feature = "http")]
use super::BackendError;
use super::{AgentBackend, AgentRequest, BackendResult, QaOracle, QaRequest};

/// Environment variable holding the QA service URL.
pub const QA_ENDPOINT_ENV: &str = "FRAMEORACLE_QA_ENDPOINT";
/// Environment variable overriding the request timeout, in milliseconds.
pub const QA_TIMEOUT_ENV: &str = "FRAMEORACLE_QA_TIMEOUT_MS";

/// QA oracle behind an HTTP endpoint.
///
/// Each call POSTs the [`QaRequest`] as JSON and expects `{"answer": "..."}`.
/// HTTP 429 maps to [`BackendError::RateLimited`] and 5xx to a retryable
/// [`BackendError::Transport`], both honouring a `Retry-After` header given
/// in seconds.
#[cfg(feature = "http")]
#[derive(Debug, Clone)]
pub struct HttpQaOracle {
    name: String,
    endpoint: String,
    max_concurrency: Option<usize>,
    agent: ureq::Agent,
}

#[cfg(feature = "http")]
#[derive(Deserialize)]
struct QaResponse {
    answer: String,
}

#[cfg(feature = "http")]
impl HttpQaOracle {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

    pub fn new(name: impl Into<String>, endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            name: name.into(),
            endpoint: endpoint.into(),
            max_concurrency: None,
            agent,
        }
    }

    /// Reads the endpoint and timeout from the environment.
    pub fn from_env(name: impl Into<String>) -> BackendResult<Self> {
        let endpoint = std::env::var(QA_ENDPOINT_ENV).map_err(|_| BackendError::Unavailable("qa endpoint"))?;
        let timeout = std::env::var(QA_TIMEOUT_ENV)
            .ok()
            .and_then(|v| v.parse().ok())
            .map_or(Self::DEFAULT_TIMEOUT, Duration::from_millis);
        Ok(Self::new(name, endpoint, timeout))
    }

    pub fn with_max_concurrency(mut self, n: usize) -> Self {
        self.max_concurrency = Some(n);
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

#[cfg(feature = "http")]
impl QaOracle for HttpQaOracle {
    fn name(&self) -> &str {
        &self.name
    }

    fn max_concurrency(&self) -> Option<usize> {
        self.max_concurrency
    }

    fn answer(&self, request: &QaRequest) -> BackendResult<String> {
        if request.frames.is_empty() {
            return Err(BackendError::Precondition("no frames supplied".into()));
        }
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(request)
            .map_err(|e| BackendError::Transport {
                message: e.to_string(),
                retry_after_ms: None,
            })?;
        let status = resp.status().as_u16();
        let retry_after_ms = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|s| s.trim().parse::<u64>().ok())
            .map(|s| s * 1000);
        match status {
            200..=299 => {
                let body: QaResponse = resp
                    .body_mut()
                    .read_json()
                    .map_err(|e| BackendError::Protocol(format!("bad response body: {e}")))?;
                Ok(body.answer)
            }
            429 => Err(BackendError::RateLimited {
                retry_after_ms: retry_after_ms.unwrap_or(1000),
            }),
            500..=599 => Err(BackendError::Transport {
                message: format!("server returned {status}"),
                retry_after_ms,
            }),
            _ => Err(BackendError::Protocol(format!("unexpected status {status}"))),
        }
    }
}

/// Delays every call by a fixed duration before delegating.
#[derive(Debug, Clone)]
pub struct LatencyInjected<B> {
    inner: B,
    delay: Duration,
}

impl<B> LatencyInjected<B> {
    pub fn new(inner: B, delay: Duration) -> Self {
        Self { inner, delay }
    }
}

impl<B: QaOracle> QaOracle for LatencyInjected<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn answer(&self, request: &QaRequest) -> BackendResult<String> {
        std::thread::sleep(self.delay);
        self.inner.answer(request)
    }

    fn max_concurrency(&self) -> Option<usize> {
        self.inner.max_concurrency()
    }
}

impl<B: AgentBackend> AgentBackend for LatencyInjected<B> {
    fn respond(&self, request: &AgentRequest) -> BackendResult<String> {
        std::thread::sleep(self.delay);
        self.inner.respond(request)
    }
}
