//! Deterministic backend replaying fixtures keyed by (session, ordinal).

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::Deserialize;
use serde_json::{json, Map, Value};

use super::{AttemptError, AttemptReply, Backend, ChatRequest, FinishReason, RequestId};
use crate::prompt::{COUNTERFACTUAL_HEADER, COUNTERFACTUAL_OUTCOME_PREFIX, FACTUAL_HEADER, FACTUAL_OUTCOME_PREFIX};
use crate::tabular::{FeatureKind, FeatureSchema};

/// Injected failure code simulating a transport error (no HTTP status).
pub const TRANSPORT_FAILURE: u16 = 0;
/// Injected failure code simulating a request timeout.
const TIMEOUT_FAILURE: u16 = 408;
/// Session name matching every session.
const ANY_SESSION: &str = "*";

pub type Responder = Arc<dyn Fn(&ChatRequest) -> String + Send + Sync>;

fn default_session() -> String {
    ANY_SESSION.to_string()
}

fn stop() -> FinishReason {
    FinishReason::Stop
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Fixture {
    pub response: String,
    /// Failure codes returned by the first attempts, in order: 0 for a
    /// transport error, 408 for a timeout, otherwise an HTTP status.
    #[serde(default)]
    pub fail: Vec<u16>,
    /// Reported latency in seconds.
    #[serde(default)]
    pub latency: f64,
    #[serde(default = "stop")]
    pub finish_reason: FinishReason,
}

impl Fixture {
    pub fn text(response: impl Into<String>) -> Self {
        Self {
            response: response.into(),
            fail: Vec::new(),
            latency: 0.0,
            finish_reason: FinishReason::Stop,
        }
    }

    pub fn failing(mut self, codes: Vec<u16>) -> Self {
        self.fail = codes;
        self
    }

    pub fn with_latency(mut self, seconds: f64) -> Self {
        self.latency = seconds;
        self
    }
}

#[derive(Debug, Deserialize)]
struct FixtureLine {
    #[serde(default = "default_session")]
    session: String,
    ordinal: usize,
    #[serde(flatten)]
    fixture: Fixture,
}

/// One attempt as seen by the backend.
#[derive(Debug, Clone, PartialEq)]
pub struct CallRecord {
    pub id: RequestId,
    /// 1-based attempt number for this request.
    pub attempt: usize,
    pub system: String,
    pub user: String,
    pub ok: bool,
}

/// Looks up `(session, ordinal)`, then `("*", ordinal)`, then the responder.
/// Attempts for requests with no match fail with status 404.
pub struct ScriptedBackend {
    name: String,
    fixtures: HashMap<(String, usize), Fixture>,
    responder: Option<Responder>,
    attempts: Mutex<HashMap<RequestId, usize>>,
    log: Mutex<Vec<CallRecord>>,
}

impl std::fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedBackend")
            .field("name", &self.name)
            .field("fixtures", &self.fixtures.len())
            .field("responder", &self.responder.is_some())
            .finish()
    }
}

impl ScriptedBackend {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            fixtures: HashMap::new(),
            responder: None,
            attempts: Mutex::new(HashMap::new()),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Ordinal `i` of every session answers `responses[i]`.
    pub fn sequence<S: Into<String>>(name: impl Into<String>, responses: impl IntoIterator<Item = S>) -> Self {
        let mut b = Self::new(name);
        for (i, r) in responses.into_iter().enumerate() {
            b.fixtures.insert((ANY_SESSION.into(), i), Fixture::text(r));
        }
        b
    }

    /// `session` may be `"*"` to match any session.
    pub fn with_fixture(mut self, session: &str, ordinal: usize, fixture: Fixture) -> Self {
        self.fixtures.insert((session.to_string(), ordinal), fixture);
        self
    }

    pub fn with_responder(mut self, responder: Responder) -> Self {
        self.responder = Some(responder);
        self
    }

    /// Parses JSONL lines of `{"session", "ordinal", "response", "fail", "latency", "finish_reason"}`.
    pub fn from_jsonl_str(name: impl Into<String>, text: &str) -> Result<Self, String> {
        let mut b = Self::new(name);
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: FixtureLine = serde_json::from_str(line).map_err(|e| format!("fixture line {}: {e}", i + 1))?;
            b.fixtures.insert((f.session, f.ordinal), f.fixture);
        }
        Ok(b)
    }

    pub fn from_jsonl_file(name: impl Into<String>, path: impl AsRef<Path>) -> Result<Self, String> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        Self::from_jsonl_str(name, &text)
    }

    /// Every attempt received so far, in arrival order.
    pub fn calls(&self) -> Vec<CallRecord> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn lookup(&self, id: &RequestId) -> Option<&Fixture> {
        self.fixtures
            .get(&(id.session.clone(), id.ordinal))
            .or_else(|| self.fixtures.get(&(ANY_SESSION.to_string(), id.ordinal)))
    }
}

impl Backend for ScriptedBackend {
    fn identity(&self) -> String {
        format!("scripted:{}", self.name)
    }

    fn attempt(&self, request: &ChatRequest) -> Result<AttemptReply, AttemptError> {
        let attempt = {
            let mut a = self.attempts.lock().unwrap_or_else(|e| e.into_inner());
            let n = a.entry(request.id.clone()).or_insert(0);
            *n += 1;
            *n
        };
        let result = match self.lookup(&request.id) {
            Some(f) => match f.fail.get(attempt - 1) {
                Some(&TRANSPORT_FAILURE) => Err(AttemptError::Retryable {
                    status: None,
                    message: "injected transport failure".into(),
                }),
                Some(&TIMEOUT_FAILURE) => Err(AttemptError::Timeout("injected timeout".into())),
                Some(&code) => Err(AttemptError::from_status(code, "injected failure")),
                None => Ok(AttemptReply {
                    text: f.response.clone(),
                    finish_reason: f.finish_reason,
                    latency: Some(f.latency),
                }),
            },
            None => match &self.responder {
                Some(r) => Ok(AttemptReply {
                    text: r(request),
                    finish_reason: FinishReason::Stop,
                    latency: Some(0.0),
                }),
                None => Err(AttemptError::Fatal {
                    status: 404,
                    message: format!("no fixture for {}", request.id),
                }),
            },
        };
        self.log.lock().unwrap_or_else(|e| e.into_inner()).push(CallRecord {
            id: request.id.clone(),
            attempt,
            system: request.system.clone(),
            user: request.user.clone(),
            ok: result.is_ok(),
        });
        result
    }
}

/// A responder that reads the instance and outcome blocks back out of the
/// prompt and answers with a faithful narrative and structured block,
/// preceded by a short reasoning span. Useful as a stand-in model for
/// deterministic end-to-end runs.
pub fn mirror_responder(schema: Arc<FeatureSchema>) -> Responder {
    Arc::new(move |request: &ChatRequest| mirror_reply(&request.user, &schema))
}

fn read_block(text: &str, header: &str, schema: &FeatureSchema) -> Option<Vec<String>> {
    let start = text.find(header)? + header.len();
    let mut lines = text[start..].lines().skip(1);
    schema
        .features
        .iter()
        .map(|f| {
            let line = lines.next()?;
            line.strip_prefix(f.display_name())?
                .strip_prefix(": ")
                .map(str::to_string)
        })
        .collect()
}

fn read_outcome(text: &str, prefix: &str, schema: &FeatureSchema) -> Option<usize> {
    let start = text.find(prefix)? + prefix.len();
    let line = text[start..].lines().next()?;
    let after = line.split_once('=').map_or(line, |(_, r)| r).trim();
    let label = after.split_whitespace().next()?;
    schema.label_index(label)
}

fn mirror_reply(prompt: &str, schema: &FeatureSchema) -> String {
    let (Some(fact), Some(cf), Some(y_fact), Some(y_cf)) = (
        read_block(prompt, FACTUAL_HEADER, schema),
        read_block(prompt, COUNTERFACTUAL_HEADER, schema),
        read_outcome(prompt, FACTUAL_OUTCOME_PREFIX, schema),
        read_outcome(prompt, COUNTERFACTUAL_OUTCOME_PREFIX, schema),
    ) else {
        return "I could not find the instances in the prompt.".to_string();
    };
    let to_map = |values: &[String]| -> Map<String, Value> {
        schema
            .features
            .iter()
            .zip(values)
            .map(|(f, v)| {
                let value = match f.kind {
                    FeatureKind::Numeric { .. } => v
                        .parse::<f64>()
                        .map(crate::tabular::number_to_json)
                        .unwrap_or_else(|_| json!(v)),
                    FeatureKind::Categorical { .. } => json!(v),
                };
                (f.name.clone(), value)
            })
            .collect()
    };
    let changes: Vec<String> = schema
        .features
        .iter()
        .zip(fact.iter().zip(&cf))
        .filter(|(_, (a, b))| a != b)
        .map(|(f, (a, b))| format!("{} from {a} to {b}", f.display_name()))
        .collect();
    let describe = |y: usize| match &schema.outcome_descriptions {
        Some(d) => d[y].clone(),
        None => format!("{} = {}", schema.target, schema.target_labels[y]),
    };
    let narrative = format!(
        "Changing {} moves the prediction from {} to {}.",
        changes.join(", "),
        describe(y_fact),
        describe(y_cf)
    );
    let block = json!({
        "factual": to_map(&fact),
        "counterfactual": to_map(&cf),
        "factual_outcome": y_fact,
        "counterfactual_outcome": y_cf,
        "narrative": narrative,
    });
    format!(
        "<think>\nComparing the two instances feature by feature.\n</think>\n{narrative}\n\n```json\n{}\n```",
        serde_json::to_string_pretty(&block).unwrap_or_default()
    )
}
