//! Blocking JSON-over-HTTP plumbing shared by the remote backend clients.

use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::BackendError;

/// Exponential backoff: retry `n` waits `base_delay * 2^n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            base_delay: Duration::ZERO,
        }
    }

    pub fn delay_for(&self, retry: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << retry.min(16))
    }

    /// Runs `op` until it succeeds, fails with a non-retryable error, or the
    /// retry budget is spent.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let mut retry = 0;
        loop {
            match op() {
                Err(e) if e.is_retryable() && retry < self.max_retries => {
                    let delay = self.delay_for(retry);
                    warn!(error = %e, retry, ?delay, "backend call failed, retrying");
                    thread::sleep(delay);
                    retry += 1;
                }
                other => return other,
            }
        }
    }
}

/// Error body returned by backends: `{"error": {"code": ..., "message": ...}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    #[serde(default)]
    pub message: String,
}

#[derive(Debug, Deserialize)]
struct WireErrorEnvelope {
    error: WireError,
}

/// Connection settings for one remote backend.
#[derive(Debug, Clone)]
pub struct Endpoint {
    pub url: String,
    pub token: Option<String>,
    pub timeout: Duration,
}

pub(crate) fn build_client(timeout: Duration) -> Result<Client, BackendError> {
    Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| BackendError::Unavailable(format!("http client: {e}")))
}

pub(crate) fn post_json<Req: Serialize, Resp: DeserializeOwned>(
    client: &Client,
    endpoint: &Endpoint,
    body: &Req,
) -> Result<Resp, BackendError> {
    let mut req = client.post(&endpoint.url).json(body);
    if let Some(token) = &endpoint.token {
        req = req.bearer_auth(token);
    }
    let resp = req.send().map_err(|e| map_transport(e, endpoint.timeout))?;
    let status = resp.status();
    let bytes = resp
        .bytes()
        .map_err(|e| map_transport(e, endpoint.timeout))?;
    if status.is_success() {
        if let Ok(env) = serde_json::from_slice::<WireErrorEnvelope>(&bytes) {
            return Err(map_wire_error(status, env.error));
        }
        return serde_json::from_slice(&bytes)
            .map_err(|e| BackendError::Protocol(format!("undecodable response: {e}")));
    }
    let wire = serde_json::from_slice::<WireErrorEnvelope>(&bytes)
        .map(|env| env.error)
        .unwrap_or_else(|_| WireError {
            code: status.as_str().to_string(),
            message: String::from_utf8_lossy(&bytes).chars().take(200).collect(),
        });
    Err(map_wire_error(status, wire))
}

fn map_transport(e: reqwest::Error, timeout: Duration) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout(timeout)
    } else {
        BackendError::Unavailable(e.to_string())
    }
}

fn map_wire_error(status: StatusCode, wire: WireError) -> BackendError {
    let detail = if wire.message.is_empty() {
        wire.code.clone()
    } else {
        format!("{}: {}", wire.code, wire.message)
    };
    if wire.code.eq_ignore_ascii_case("content_rejected") {
        return BackendError::Rejected(detail);
    }
    if status == StatusCode::TOO_MANY_REQUESTS
        || status.is_server_error()
        || wire.code.eq_ignore_ascii_case("unavailable")
    {
        return BackendError::Unavailable(detail);
    }
    BackendError::Protocol(detail)
}
