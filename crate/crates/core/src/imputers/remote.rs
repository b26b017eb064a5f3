use std::time::Duration;

use super::wire::{HealthResponse, ImputeRequest, ImputeResponse};
use super::{Imputer, ImputerKind};
use crate::dataset::MaskedSeries;
use crate::error::{Error, Result};

pub const TIMEOUT_ENV_VAR: &str = "IMPUTEAUDIT_TIMEOUT_MS";
pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

/// Client for a model served over the JSON protocol.
///
/// The client is cheap to clone and safe to share between worker threads;
/// connections are pooled, so concurrent calls are issued in parallel.
#[derive(Clone, Debug)]
pub struct RemoteImputer {
    endpoint: String,
    timeout: Duration,
    client: reqwest::blocking::Client,
}

impl RemoteImputer {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self> {
        let endpoint = endpoint.into().trim_end_matches('/').to_string();
        if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
            return Err(Error::Config(format!(
                "remote endpoint {endpoint:?} must be an http(s) URL"
            )));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .pool_max_idle_per_host(64)
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self {
            endpoint,
            timeout,
            client,
        })
    }

    /// Uses the timeout from `IMPUTEAUDIT_TIMEOUT_MS`, or 30 s when unset.
    pub fn from_env(endpoint: impl Into<String>) -> Result<Self> {
        Self::new(endpoint, timeout_from_env()?)
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn health(&self) -> Result<HealthResponse> {
        let resp = self
            .client
            .get(format!("{}/health", self.endpoint))
            .send()
            .map_err(|e| Error::Transport(e.to_string()))?;
        decode(resp)
    }
}

pub(crate) fn timeout_from_env() -> Result<Duration> {
    match std::env::var(TIMEOUT_ENV_VAR) {
        Ok(raw) => raw
            .trim()
            .parse::<u64>()
            .map(Duration::from_millis)
            .map_err(|_| Error::Config(format!("{TIMEOUT_ENV_VAR}={raw:?} is not a number of ms"))),
        Err(_) => Ok(Duration::from_millis(DEFAULT_TIMEOUT_MS)),
    }
}

fn decode<T: serde::de::DeserializeOwned>(resp: reqwest::blocking::Response) -> Result<T> {
    let status = resp.status();
    let body = resp.text().map_err(|e| Error::Transport(e.to_string()))?;
    if !status.is_success() {
        return Err(Error::Transport(format!("server answered {status}: {body}")));
    }
    serde_json::from_str(&body).map_err(|e| Error::Transport(format!("malformed response: {e}")))
}

impl Imputer for RemoteImputer {
    fn kind(&self) -> ImputerKind {
        ImputerKind::Remote
    }

    fn impute(&self, masked: &MaskedSeries) -> Result<Vec<f64>> {
        let resp = self
            .client
            .post(format!("{}/impute", self.endpoint))
            .json(&ImputeRequest::from(masked))
            .send()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let body: ImputeResponse = decode(resp)?;
        body.imputed
            .into_iter()
            .enumerate()
            .map(|(t, v)| {
                v.ok_or_else(|| Error::ModelOutput(format!("remote model returned null at t={t}")))
            })
            .collect()
    }
}
