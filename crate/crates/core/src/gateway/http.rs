//! Chat-completions HTTP backend (`POST {base_url}/chat/completions`).

use std::time::Duration;

use serde_json::{json, Value};

use super::{AttemptError, AttemptReply, Backend, ChatRequest, ConfigError, FinishReason, ModelEndpoint};

pub struct HttpBackend {
    endpoint: ModelEndpoint,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.endpoint)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpBackend {
    /// Validates the endpoint and reads the API key from `auth_env`, if named.
    pub fn new(endpoint: ModelEndpoint) -> Result<Self, ConfigError> {
        endpoint.validate()?;
        let api_key = match &endpoint.auth_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| ConfigError(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(endpoint.timeout_secs))
            .build()
            .map_err(|e| ConfigError(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            endpoint,
            api_key,
            client,
        })
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    /// JSON body sent for `request`.
    pub fn request_body(&self, request: &ChatRequest) -> Value {
        let mut messages = Vec::new();
        if !request.system.is_empty() {
            messages.push(json!({"role": "system", "content": request.system}));
        }
        messages.push(json!({"role": "user", "content": request.user}));
        let s = &self.endpoint.sampling;
        let mut body = json!({
            "model": self.endpoint.model_name,
            "messages": messages,
            "temperature": s.temperature,
            "top_p": s.top_p,
            "max_tokens": s.max_tokens,
            "stream": false,
        });
        if !self.endpoint.omit_extended_sampling {
            body["top_k"] = json!(s.top_k);
            body["repetition_penalty"] = json!(s.repetition_penalty);
        }
        body
    }
}

/// Extracts text and finish reason from a chat-completions response.
/// A separate `reasoning_content` field is folded back in as a think span.
pub fn parse_response(body: &Value) -> Option<(String, FinishReason)> {
    let choice = body.get("choices")?.get(0)?;
    let message = choice.get("message")?;
    let content = message.get("content").and_then(Value::as_str).unwrap_or("");
    let text = match message.get("reasoning_content").and_then(Value::as_str) {
        Some(r) if !r.is_empty() => format!("<think>{r}</think>{content}"),
        _ => content.to_string(),
    };
    let finish = FinishReason::from_wire(choice.get("finish_reason").and_then(Value::as_str));
    Some((text, finish))
}

impl Backend for HttpBackend {
    fn identity(&self) -> String {
        format!("http:{}@{}", self.endpoint.model_name, self.endpoint.base_url)
    }

    fn attempt(&self, request: &ChatRequest) -> Result<AttemptReply, AttemptError> {
        let url = format!("{}/chat/completions", self.endpoint.base_url.trim_end_matches('/'));
        let mut builder = self.client.post(url).json(&self.request_body(request));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                AttemptError::Timeout(e.to_string())
            } else {
                AttemptError::Retryable {
                    status: None,
                    message: e.to_string(),
                }
            }
        })?;
        let status = response.status().as_u16();
        let text = response.text().map_err(|e| {
            if e.is_timeout() {
                AttemptError::Timeout(e.to_string())
            } else {
                AttemptError::Retryable {
                    status: Some(status),
                    message: e.to_string(),
                }
            }
        })?;
        if !(200..300).contains(&status) {
            let snippet: String = text.chars().take(300).collect();
            return Err(AttemptError::from_status(status, snippet));
        }
        let body: Value = serde_json::from_str(&text).map_err(|e| AttemptError::Retryable {
            status: Some(status),
            message: format!("malformed response body: {e}"),
        })?;
        let (text, finish_reason) = parse_response(&body).ok_or_else(|| AttemptError::Retryable {
            status: Some(status),
            message: "response has no choices[0].message".into(),
        })?;
        Ok(AttemptReply {
            text,
            finish_reason,
            latency: None,
        })
    }
}
