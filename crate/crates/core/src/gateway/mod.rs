//! Uniform access to chat-completion backends.
//!
//! A [`Backend`] performs single attempts. The [`Gateway`] wrapping it owns
//! retries (exponential backoff with jitter), attempt counting and the cap on
//! simultaneously outstanding requests.

mod http;
mod reasoning;
mod scripted;

use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpBackend;
pub use reasoning::{strip_reasoning, strip_reasoning_flagged, Stripped};
pub use scripted::{mirror_responder, CallRecord, Fixture, Responder, ScriptedBackend, TRANSPORT_FAILURE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_k: u32,
    pub top_p: f64,
    pub max_tokens: u32,
    pub repetition_penalty: f64,
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError(m.to_string()));
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return bad("temperature must be >= 0");
        }
        if self.top_k == 0 {
            return bad("top_k must be positive");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must be in (0, 1]");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        if !(self.repetition_penalty >= 1.0) || !self.repetition_penalty.is_finite() {
            return bad("repetition_penalty must be >= 1");
        }
        Ok(())
    }

    /// Recommended sampling settings for the drafter, refiner and teacher models.
    pub fn for_model(model: &str) -> Option<Self> {
        let base = |temperature, top_p| Self {
            temperature,
            top_k: 10,
            top_p,
            max_tokens: 8192,
            repetition_penalty: 1.05,
        };
        let name = model.rsplit('/').next().unwrap_or(model);
        match name {
            "Qwen2.5-0.5B-Instruct" | "Qwen2.5-3B-Instruct" => Some(base(0.6, 0.8)),
            "DeepSeek-R1-Distill-Qwen-1.5B" | "DeepSeek-R1-Distill-Qwen-7B" => Some(base(0.6, 0.7)),
            "DeepSeek-R1-Distill-Qwen-32B" => Some(base(0.7, 0.7)),
            _ => None,
        }
    }
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.6,
            top_k: 10,
            top_p: 0.8,
            max_tokens: 8192,
            repetition_penalty: 1.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid endpoint configuration: {0}")]
pub struct ConfigError(pub String);

fn default_timeout() -> f64 {
    120.0
}
fn default_retries() -> u32 {
    3
}

/// An HTTP chat-completions endpoint. The API key is never stored here,
/// only the name of the environment variable holding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub base_url: String,
    pub model_name: String,
    pub sampling: SamplingParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Drop `top_k` and `repetition_penalty` from requests for servers that reject them.
    #[serde(default)]
    pub omit_extended_sampling: bool,
}

impl ModelEndpoint {
    /// Endpoint with the recommended sampling preset for `model_name`, or defaults.
    pub fn new(base_url: &str, model_name: &str) -> Self {
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            model_name: model_name.to_string(),
            sampling: SamplingParams::for_model(model_name).unwrap_or_default(),
            auth_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            omit_extended_sampling: false,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.timeout_secs > 0.0) || !self.timeout_secs.is_finite() {
            return Err(ConfigError("timeout must be positive".into()));
        }
        if self.base_url.is_empty() || self.model_name.is_empty() {
            return Err(ConfigError("base_url and model_name are required".into()));
        }
        self.sampling.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

impl FinishReason {
    pub fn from_wire(s: Option<&str>) -> Self {
        match s {
            Some("stop") | Some("eos") | None => FinishReason::Stop,
            Some("length") => FinishReason::Length,
            Some(_) => FinishReason::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub raw_text: String,
    pub finish_reason: FinishReason,
    /// Seconds taken by the successful attempt.
    pub latency: f64,
    pub attempt_count: u32,
}

/// Identifies one logical request: its session (e.g. `row-4/draft`) and
/// ordinal within that session.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RequestId {
    pub session: String,
    pub ordinal: usize,
}

impl RequestId {
    pub fn new(session: impl Into<String>, ordinal: usize) -> Self {
        Self {
            session: session.into(),
            ordinal,
        }
    }
}

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.session, self.ordinal)
    }
}

/// One system message and one user message.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub id: RequestId,
    pub system: String,
    pub user: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttemptReply {
    pub text: String,
    pub finish_reason: FinishReason,
    /// Backend-reported latency; the gateway measures wall-clock time when absent.
    pub latency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttemptError {
    /// Transport failure, 429 or 5xx.
    #[error("retryable failure (status {status:?}): {message}")]
    Retryable { status: Option<u16>, message: String },
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("status {status}: {message}")]
    Fatal { status: u16, message: String },
}

impl AttemptError {
    /// Classifies an HTTP status code.
    pub fn from_status(status: u16, message: impl Into<String>) -> Self {
        let message = message.into();
        if status == 429 || status >= 500 {
            AttemptError::Retryable {
                status: Some(status),
                message,
            }
        } else {
            AttemptError::Fatal { status, message }
        }
    }
}

/// A single-attempt chat-completion backend.
pub trait Backend: Send + Sync {
    /// Human-readable identity recorded in run manifests.
    fn identity(&self) -> String;
    fn attempt(&self, request: &ChatRequest) -> Result<AttemptReply, AttemptError>;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("request {request}: empty prompt")]
    EmptyPrompt { request: RequestId },
    #[error("request {request}: gave up after {attempts} attempts: {last}")]
    ExhaustedRetries {
        request: RequestId,
        attempts: u32,
        last: String,
    },
    #[error("request {request}: non-retryable status {status}: {message}")]
    NonRetryable {
        request: RequestId,
        status: u16,
        message: String,
    },
    #[error("request {request}: timed out after {attempts} attempts")]
    Timeout { request: RequestId, attempts: u32 },
}

impl GatewayError {
    pub fn request(&self) -> &RequestId {
        match self {
            GatewayError::EmptyPrompt { request }
            | GatewayError::ExhaustedRetries { request, .. }
            | GatewayError::NonRetryable { request, .. }
            | GatewayError::Timeout { request, .. } => request,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// Delay before the first retry; doubles each time.
    pub backoff_base: Duration,
    /// Scale each delay by a uniform factor in [0.5, 1).
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            backoff_base: Duration::from_secs(1),
            jitter: true,
        }
    }
}

impl RetryPolicy {
    pub fn no_backoff(max_retries: u32) -> Self {
        Self {
            max_retries,
            backoff_base: Duration::ZERO,
            jitter: false,
        }
    }

    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let nominal = self.backoff_base.mul_f64(2f64.powi(retry.saturating_sub(1).min(30) as i32));
        if self.jitter && !nominal.is_zero() {
            nominal.mul_f64(rand::thread_rng().gen_range(0.5..1.0))
        } else {
            nominal
        }
    }
}

#[derive(Debug, Default)]
struct InFlight {
    current: usize,
    peak: usize,
}

/// Counting semaphore bounding outstanding requests.
#[derive(Debug)]
struct Limiter {
    cap: usize,
    state: Mutex<InFlight>,
    freed: Condvar,
}

impl Limiter {
    fn acquire(&self) -> Permit<'_> {
        let mut s = self.state.lock().unwrap_or_else(|e| e.into_inner());
        while s.current >= self.cap {
            s = self.freed.wait(s).unwrap_or_else(|e| e.into_inner());
        }
        s.current += 1;
        s.peak = s.peak.max(s.current);
        Permit(self)
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut s = self.0.state.lock().unwrap_or_else(|e| e.into_inner());
        s.current -= 1;
        self.0.freed.notify_one();
    }
}

/// A backend plus retry policy and in-flight cap. Cheap to share by reference
/// across threads.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    policy: RetryPolicy,
    limiter: Limiter,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.identity())
            .field("policy", &self.policy)
            .field("cap", &self.limiter.cap)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, policy: RetryPolicy, in_flight_cap: usize) -> Self {
        Self {
            backend,
            policy,
            limiter: Limiter {
                cap: in_flight_cap.max(1),
                state: Mutex::new(InFlight::default()),
                freed: Condvar::new(),
            },
        }
    }

    /// Gateway for an HTTP endpoint, using its retry count and the default backoff.
    pub fn http(endpoint: ModelEndpoint, in_flight_cap: usize) -> Result<Self, ConfigError> {
        let policy = RetryPolicy {
            max_retries: endpoint.max_retries,
            ..RetryPolicy::default()
        };
        let backend = HttpBackend::new(endpoint)?;
        Ok(Self::new(Arc::new(backend), policy, in_flight_cap))
    }

    pub fn identity(&self) -> String {
        self.backend.identity()
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    /// Highest number of simultaneously outstanding requests seen so far.
    pub fn peak_in_flight(&self) -> usize {
        self.limiter.state.lock().unwrap_or_else(|e| e.into_inner()).peak
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        if request.user.trim().is_empty() && request.system.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt {
                request: request.id.clone(),
            });
        }
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let started = Instant::now();
            let result = {
                let _permit = self.limiter.acquire();
                self.backend.attempt(request)
            };
            let elapsed = started.elapsed().as_secs_f64();
            let err = match result {
                Ok(reply) => {
                    return Ok(Completion {
                        raw_text: reply.text,
                        finish_reason: reply.finish_reason,
                        latency: reply.latency.unwrap_or(elapsed).max(0.0),
                        attempt_count: attempts,
                    })
                }
                Err(AttemptError::Fatal { status, message }) => {
                    return Err(GatewayError::NonRetryable {
                        request: request.id.clone(),
                        status,
                        message,
                    })
                }
                Err(e) => e,
            };
            if attempts > self.policy.max_retries {
                return Err(match err {
                    AttemptError::Timeout(_) => GatewayError::Timeout {
                        request: request.id.clone(),
                        attempts,
                    },
                    other => GatewayError::ExhaustedRetries {
                        request: request.id.clone(),
                        attempts,
                        last: other.to_string(),
                    },
                });
            }
            log::warn!("request {} attempt {attempts} failed: {err}; retrying", request.id);
            std::thread::sleep(self.policy.delay(attempts));
        }
    }
}
