//! Blocking client for OpenAI-compatible `completions` / `embeddings`.

use std::time::Duration;

use rand::Rng;
use serde_json::{json, Value};

use super::{BackendError, CompletionRequest, Provider, ProviderOutput};

pub const API_KEY_VAR: &str = "FSRE_API_KEY";
pub const BASE_URL_VAR: &str = "FSRE_BASE_URL";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Full-jitter exponential backoff for the given retry number (1-based).
    fn backoff(&self, retry: u32) -> Duration {
        let cap = self
            .base_delay
            .saturating_mul(1u32 << retry.saturating_sub(1).min(16))
            .min(self.max_delay);
        if cap.is_zero() {
            return cap;
        }
        let ms = cap.as_millis() as u64;
        Duration::from_millis(rand::rng().random_range(ms / 2..=ms))
    }
}

#[derive(Debug, Clone)]
pub struct LiveConfig {
    pub base_url: String,
    pub api_key: String,
    pub retry: RetryPolicy,
    pub timeout: Duration,
}

impl LiveConfig {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: api_key.into(),
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(120),
        }
    }

    /// Reads `FSRE_API_KEY` (required) and `FSRE_BASE_URL` (optional).
    /// `base_url` overrides the environment when given.
    pub fn from_env(base_url: Option<&str>) -> Result<Self, BackendError> {
        let key = std::env::var(API_KEY_VAR)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or(BackendError::MissingCredential)?;
        let url = base_url
            .map(str::to_string)
            .or_else(|| std::env::var(BASE_URL_VAR).ok().filter(|u| !u.is_empty()))
            .unwrap_or_else(|| DEFAULT_BASE_URL.to_string());
        Ok(Self::new(url, key))
    }
}

pub struct LiveProvider {
    config: LiveConfig,
    agent: ureq::Agent,
}

impl LiveProvider {
    pub fn new(config: LiveConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        Self { config, agent }
    }

    fn url(&self, endpoint: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), endpoint)
    }

    /// POSTs `body`, retrying on transport failures, 429 and 5xx.
    fn post(&self, endpoint: &str, body: &Value) -> Result<(Value, u32), BackendError> {
        let url = self.url(endpoint);
        let policy = &self.config.retry;
        let mut retries = 0u32;
        loop {
            let attempt = self
                .agent
                .post(&url)
                .header("Authorization", &format!("Bearer {}", self.config.api_key))
                .send_json(body);
            let (wait_hint, failure) = match attempt {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let retry_after = resp
                        .headers()
                        .get("retry-after")
                        .and_then(|v| v.to_str().ok())
                        .and_then(|v| v.trim().parse::<f64>().ok())
                        .filter(|s| s.is_finite() && *s >= 0.0)
                        .map(Duration::from_secs_f64);
                    let text = resp
                        .body_mut()
                        .read_to_string()
                        .map_err(|e| BackendError::Decode(e.to_string()))?;
                    match status {
                        200..=299 => {
                            let value = serde_json::from_str(&text)
                                .map_err(|e| BackendError::Decode(format!("{e}: {text}")))?;
                            return Ok((value, retries));
                        }
                        401 | 403 => return Err(BackendError::Authentication { status, body: text }),
                        429 | 500..=599 => (retry_after, format!("HTTP {status}: {text}")),
                        _ => return Err(BackendError::Provider { status, body: text }),
                    }
                }
                Err(e) => (None, e.to_string()),
            };
            if retries >= policy.max_retries {
                return Err(BackendError::Network {
                    attempts: retries + 1,
                    message: failure,
                });
            }
            retries += 1;
            let delay = wait_hint.unwrap_or_else(|| policy.backoff(retries));
            log::warn!("{endpoint} attempt {retries} failed ({failure}); retrying in {delay:?}");
            std::thread::sleep(delay);
        }
    }
}

fn usage(value: &Value, field: &str) -> Option<u64> {
    value.get("usage")?.get(field)?.as_u64()
}

impl Provider for LiveProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<ProviderOutput<String>, BackendError> {
        let mut body = json!({
            "model": request.model,
            "prompt": request.prompt,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        if let Some(stop) = &request.stop {
            body["stop"] = json!(stop);
        }
        let (value, retries) = self.post("completions", &body)?;
        let text = value
            .pointer("/choices/0/text")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Decode(format!("no choices[0].text in {value}")))?
            .to_string();
        Ok(ProviderOutput {
            value: text,
            retries,
            tokens_in: usage(&value, "prompt_tokens"),
            tokens_out: usage(&value, "completion_tokens"),
        })
    }

    fn embed(&self, text: &str, model: &str) -> Result<ProviderOutput<Vec<f64>>, BackendError> {
        let body = json!({"model": model, "input": text});
        let (value, retries) = self.post("embeddings", &body)?;
        let values = value
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Decode(format!("no data[0].embedding in {value}")))?
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| BackendError::Decode("non-numeric embedding component".into()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ProviderOutput {
            value: values,
            retries,
            tokens_in: usage(&value, "prompt_tokens"),
            tokens_out: None,
        })
    }
}
