//! HTTP adapter for served models.
//!
//! Wire format: `POST {base_url}` with JSON body
//! `{"prompt": string, "max_tokens": 1, "logprobs": int?, "temperature": number}`.
//! The response may be a bare object (`{"text": "..."}` or
//! `{"logprobs": {"a": -1.2, ...}}`) or a completions-style envelope
//! (`{"choices": [{"text": "...", "logprobs": {"top_logprobs": [{...}]}}]}`);
//! both are accepted.
//!
//! Requests retry on transport errors and 429/5xx responses with exponential
//! backoff, and all in-flight traffic passes through a concurrency gate plus
//! an optional token-bucket rate limit.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::prefix::Prefix;

use super::{AccessError, SelectionTask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEndpoint {
    pub base_url: String,
    /// Name of the environment variable holding the bearer token, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    pub mode: RemoteMode,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Total attempts per request.
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    /// Initial backoff; doubles per retry.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests_per_second: Option<f64>,
    /// Extra top-k slots requested beyond the candidate count.
    #[serde(default = "default_margin")]
    pub logprob_margin: usize,
}

fn default_timeout_ms() -> u64 {
    10_000
}
fn default_attempts() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_in_flight() -> usize {
    4
}
fn default_margin() -> usize {
    20
}

impl RemoteEndpoint {
    pub fn new(base_url: impl Into<String>, mode: RemoteMode) -> Self {
        Self {
            base_url: base_url.into(),
            auth_env: None,
            mode,
            timeout_ms: default_timeout_ms(),
            max_attempts: default_attempts(),
            backoff_ms: default_backoff_ms(),
            max_in_flight: default_in_flight(),
            requests_per_second: None,
            logprob_margin: default_margin(),
        }
    }
}

/// What the endpoint exposes: generated text only (black-box) or top-k
/// token log-probabilities (gray-box).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RemoteMode {
    Chat,
    Logprob,
}

pub(super) struct RemoteClient {
    endpoint: RemoteEndpoint,
    http: reqwest::blocking::Client,
    gate: Gate,
}

#[derive(Serialize)]
struct RequestBody<'a> {
    prompt: &'a str,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<usize>,
    temperature: f64,
}

impl RemoteClient {
    pub fn new(endpoint: RemoteEndpoint) -> Self {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(endpoint.timeout_ms))
            .build()
            .expect("http client");
        let gate = Gate::new(endpoint.max_in_flight, endpoint.requests_per_second);
        Self {
            endpoint,
            http,
            gate,
        }
    }

    pub fn raw_candidate_probs(
        &self,
        prefix: &Prefix,
        task: &SelectionTask,
    ) -> Result<Vec<f64>, AccessError> {
        if self.endpoint.mode != RemoteMode::Logprob {
            return Err(AccessError::BadResponse(
                "endpoint is chat-only; no logprobs available".into(),
            ));
        }
        let text = super::render_prefix_text(prefix, task)
            .ok_or_else(|| AccessError::IncompatibleModality {
                id: "remote".into(),
                kind: prefix.kind(),
            })?;
        let k = task.n() + self.endpoint.logprob_margin;
        let value = self.post(&text, Some(k))?;
        let logprobs = extract_logprobs(&value)
            .ok_or_else(|| AccessError::BadResponse("no logprob map in response".into()))?;
        // candidates missing from the returned top-k get probability zero
        Ok(task
            .candidates
            .iter()
            .map(|c| logprobs.get(c.as_str()).map_or(0.0, |&lp| lp.exp()))
            .collect())
    }

    pub fn sample_text(&self, input: &str) -> Result<String, AccessError> {
        let value = self.post(input, None)?;
        extract_text(&value)
            .ok_or_else(|| AccessError::BadResponse("no generated text in response".into()))
    }

    fn post(&self, prompt: &str, logprobs: Option<usize>) -> Result<Value, AccessError> {
        let body = RequestBody {
            prompt,
            max_tokens: 1,
            logprobs,
            temperature: 1.0,
        };
        let token = self
            .endpoint
            .auth_env
            .as_ref()
            .and_then(|name| std::env::var(name).ok());
        let mut last_err = String::new();
        for attempt in 1..=self.endpoint.max_attempts {
            if attempt > 1 {
                let backoff = self.endpoint.backoff_ms << (attempt - 2);
                std::thread::sleep(Duration::from_millis(backoff));
            }
            let _slot = self.gate.acquire();
            let mut req = self.http.post(&self.endpoint.base_url).json(&body);
            if let Some(tok) = &token {
                req = req.bearer_auth(tok);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp
                            .json::<Value>()
                            .map_err(|e| AccessError::BadResponse(e.to_string()));
                    }
                    if status.as_u16() == 429 || status.is_server_error() {
                        last_err = format!("status {status}");
                        continue;
                    }
                    return Err(AccessError::Transport {
                        attempts: attempt,
                        message: format!("status {status}"),
                    });
                }
                Err(e) => {
                    last_err = e.to_string();
                }
            }
        }
        Err(AccessError::Transport {
            attempts: self.endpoint.max_attempts,
            message: last_err,
        })
    }
}

fn extract_text(value: &Value) -> Option<String> {
    if let Some(t) = value.get("text").and_then(Value::as_str) {
        return Some(t.to_string());
    }
    value
        .get("choices")?
        .get(0)?
        .get("text")
        .and_then(Value::as_str)
        .map(str::to_string)
}

fn extract_logprobs(value: &Value) -> Option<BTreeMap<String, f64>> {
    let map = if let Some(m) = value.get("logprobs").and_then(Value::as_object) {
        m
    } else {
        value
            .get("choices")?
            .get(0)?
            .get("logprobs")?
            .get("top_logprobs")?
            .get(0)?
            .as_object()?
    };
    Some(
        map.iter()
            .filter_map(|(k, v)| v.as_f64().map(|f| (k.clone(), f)))
            .collect(),
    )
}

/// Concurrency limiter plus optional token bucket.
struct Gate {
    state: Mutex<GateState>,
    cv: Condvar,
    max_in_flight: usize,
    rate: Option<f64>,
}

struct GateState {
    in_flight: usize,
    tokens: f64,
    last_refill: Instant,
}

impl Gate {
    fn new(max_in_flight: usize, rate: Option<f64>) -> Self {
        Self {
            state: Mutex::new(GateState {
                in_flight: 0,
                tokens: rate.unwrap_or(0.0).max(1.0),
                last_refill: Instant::now(),
            }),
            cv: Condvar::new(),
            max_in_flight: max_in_flight.max(1),
            rate,
        }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut st = self.state.lock().expect("gate lock");
        loop {
            if let Some(rate) = self.rate {
                let now = Instant::now();
                let elapsed = now.duration_since(st.last_refill).as_secs_f64();
                st.tokens = (st.tokens + elapsed * rate).min(rate.max(1.0));
                st.last_refill = now;
            }
            let has_token = self.rate.is_none() || st.tokens >= 1.0;
            if st.in_flight < self.max_in_flight && has_token {
                st.in_flight += 1;
                if self.rate.is_some() {
                    st.tokens -= 1.0;
                }
                return GateGuard { gate: self };
            }
            let wait = Duration::from_millis(10);
            let (next, _) = self.cv.wait_timeout(st, wait).expect("gate wait");
            st = next;
        }
    }
}

struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut st = self.gate.state.lock().expect("gate lock");
        st.in_flight -= 1;
        drop(st);
        self.gate.cv.notify_one();
    }
}
