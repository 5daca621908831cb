//! Multi-narrative refinement: N independent drafts from a drafter model,
//! merged into one narrative by a refiner model.
//!
//! Per pair, the draft prompt is rendered once and sent `n_drafts` times
//! (requests `{pair_id}/draft#0..n`), concurrently up to the drafter's cap.
//! Once every draft has arrived, the refiner prompt embeds them in request
//! order and is sent once (`{pair_id}/refiner#0`).

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde_json::{json, Value};
use thiserror::Error;

use crate::counterfactual::CounterfactualPair;
use crate::gateway::{strip_reasoning_flagged, ChatRequest, Completion, Gateway, GatewayError, RequestId};
use crate::metrics::parse::{parse_structured, ExtractedNarrative, ParseError};
use crate::prompt::{render_draft, render_refiner, PromptError, PromptTemplate, RenderedPrompt, Stage};
use crate::tabular::FeatureSchema;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("prompt error: {0}")]
    Prompt(#[from] PromptError),
    #[error("{stage} stage failed: {source}")]
    Backend {
        stage: Stage,
        #[source]
        source: GatewayError,
    },
    #[error("empty pair list")]
    NoPairs,
    #[error("narratives line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub drafter: Arc<Gateway>,
    pub refiner: Arc<Gateway>,
    pub n_drafts: usize,
    pub draft_template: PromptTemplate,
    pub refiner_template: PromptTemplate,
    /// Pairs processed concurrently by [`run_batch`].
    pub in_flight_cap: usize,
}

impl PipelineConfig {
    /// Three drafts with the default templates.
    pub fn new(drafter: Arc<Gateway>, refiner: Arc<Gateway>) -> Self {
        Self {
            drafter,
            refiner,
            n_drafts: 3,
            draft_template: PromptTemplate::default_draft(),
            refiner_template: PromptTemplate::default_refiner(3),
            in_flight_cap: 1,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.n_drafts == 0 {
            return Err(PipelineError::Config("n_drafts must be at least 1".into()));
        }
        if self.in_flight_cap == 0 {
            return Err(PipelineError::Config("in_flight_cap must be at least 1".into()));
        }
        if self.draft_template.stage != Stage::Draft || self.refiner_template.stage != Stage::Refiner {
            return Err(PipelineError::Config("templates are assigned to the wrong stages".into()));
        }
        self.draft_template.validate()?;
        self.refiner_template.validate()?;
        if self.refiner_template.n_drafts() != self.n_drafts {
            return Err(PipelineError::Config(format!(
                "refiner template has {} draft slots but n_drafts is {}",
                self.refiner_template.n_drafts(),
                self.n_drafts
            )));
        }
        Ok(())
    }
}

/// One explained pair.
#[derive(Debug, Clone, PartialEq)]
pub struct NarrativeRecord {
    /// Position of the pair in the batch input.
    pub index: usize,
    pub pair: CounterfactualPair,
    /// Raw drafter outputs in request order.
    pub drafts: Vec<String>,
    pub draft_latencies: Vec<f64>,
    pub refined_raw: String,
    pub refined_clean: String,
    /// The refined output had an unterminated reasoning span.
    pub reasoning_unclosed: bool,
    pub refiner_latency: f64,
    pub extraction: Result<ExtractedNarrative, ParseError>,
}

impl NarrativeRecord {
    pub fn pair_id(&self) -> &str {
        &self.pair.id
    }

    pub fn to_json(&self, schema: &FeatureSchema) -> Value {
        let (extraction, parse_error) = match &self.extraction {
            Ok(e) => (e.to_json(schema), Value::Null),
            Err(err) => (Value::Null, json!(err.to_string())),
        };
        json!({
            "index": self.index,
            "pair_id": self.pair.id,
            "pair": self.pair.to_json(schema),
            "drafts": self.drafts,
            "draft_latencies": self.draft_latencies,
            "refined_raw": self.refined_raw,
            "refined_clean": self.refined_clean,
            "reasoning_unclosed": self.reasoning_unclosed,
            "refiner_latency": self.refiner_latency,
            "extraction": extraction,
            "parse_error": parse_error,
        })
    }

    /// Rebuilds a record, re-deriving the cleaned text and extraction from `refined_raw`.
    pub fn from_json(value: &Value, schema: &FeatureSchema) -> Result<Self, String> {
        let pair = CounterfactualPair::from_json(&value["pair"], schema).map_err(|e| e.to_string())?;
        let refined_raw = value["refined_raw"]
            .as_str()
            .ok_or("missing refined_raw")?
            .to_string();
        let strings = |key: &str| -> Vec<String> {
            value[key]
                .as_array()
                .map(|a| a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect())
                .unwrap_or_default()
        };
        let floats = |key: &str| -> Vec<f64> {
            value[key]
                .as_array()
                .map(|a| a.iter().filter_map(Value::as_f64).collect())
                .unwrap_or_default()
        };
        let mut record = finish_record(
            value["index"].as_u64().unwrap_or(0) as usize,
            pair,
            strings("drafts"),
            floats("draft_latencies"),
            refined_raw,
            value["refiner_latency"].as_f64().unwrap_or(0.0),
            schema,
        );
        if record.draft_latencies.len() != record.drafts.len() {
            record.draft_latencies = vec![0.0; record.drafts.len()];
        }
        Ok(record)
    }
}

fn finish_record(
    index: usize,
    pair: CounterfactualPair,
    drafts: Vec<String>,
    draft_latencies: Vec<f64>,
    refined_raw: String,
    refiner_latency: f64,
    schema: &FeatureSchema,
) -> NarrativeRecord {
    let stripped = strip_reasoning_flagged(&refined_raw);
    let extraction = parse_structured(&refined_raw, schema);
    NarrativeRecord {
        index,
        pair,
        drafts,
        draft_latencies,
        refined_clean: stripped.text,
        reasoning_unclosed: stripped.unclosed,
        refined_raw,
        refiner_latency,
        extraction,
    }
}

/// Request `ordinal` of session `{pair_id}/{role}`.
pub(crate) fn chat_request(prompt: &RenderedPrompt, role: &str, ordinal: usize) -> ChatRequest {
    ChatRequest {
        id: RequestId::new(format!("{}/{role}", prompt.pair_id), ordinal),
        system: prompt.system.clone(),
        user: prompt.text.clone(),
    }
}

/// Sends `prompt` `n` times concurrently; results come back in request order.
pub fn draft_completions(
    gateway: &Gateway,
    prompt: &RenderedPrompt,
    n: usize,
) -> Result<Vec<Completion>, GatewayError> {
    let results: Vec<Result<Completion, GatewayError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .map(|i| {
                let req = chat_request(prompt, "draft", i);
                s.spawn(move || gateway.complete(&req))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    });
    results.into_iter().collect()
}

/// The text of each draft as embedded in the refiner prompt: reasoning spans removed.
pub fn draft_texts(drafts: &[String]) -> Vec<String> {
    drafts.iter().map(|d| strip_reasoning_flagged(d).text).collect()
}

/// Runs both stages for one pair.
pub fn run_instance(
    config: &PipelineConfig,
    pair: &CounterfactualPair,
    schema: &FeatureSchema,
) -> Result<NarrativeRecord, PipelineError> {
    run_indexed(config, 0, pair, schema)
}

fn run_indexed(
    config: &PipelineConfig,
    index: usize,
    pair: &CounterfactualPair,
    schema: &FeatureSchema,
) -> Result<NarrativeRecord, PipelineError> {
    let draft_prompt = render_draft(&config.draft_template, pair, schema)?;
    let completions = draft_completions(&config.drafter, &draft_prompt, config.n_drafts)
        .map_err(|source| PipelineError::Backend { stage: Stage::Draft, source })?;
    let drafts: Vec<String> = completions.iter().map(|c| c.raw_text.clone()).collect();
    let refiner_prompt = render_refiner(&config.refiner_template, pair, schema, &draft_texts(&drafts))?;
    let refined = config
        .refiner
        .complete(&chat_request(&refiner_prompt, "refiner", 0))
        .map_err(|source| PipelineError::Backend { stage: Stage::Refiner, source })?;
    Ok(finish_record(
        index,
        pair.clone(),
        drafts,
        completions.iter().map(|c| c.latency).collect(),
        refined.raw_text,
        refined.latency,
        schema,
    ))
}

#[derive(Debug)]
pub struct StageFailure {
    pub index: usize,
    pub pair_id: String,
    /// `None` when the failure happened before any backend call (e.g. rendering).
    pub stage: Option<Stage>,
    pub error: PipelineError,
}

#[derive(Debug, Default)]
pub struct BatchReport {
    /// Successful records in input order.
    pub records: Vec<NarrativeRecord>,
    pub failures: Vec<StageFailure>,
}

impl BatchReport {
    pub fn to_jsonl(&self, schema: &FeatureSchema) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_json(schema).to_string());
            out.push('\n');
        }
        out
    }

    pub fn failures_json(&self) -> Value {
        Value::Array(
            self.failures
                .iter()
                .map(|f| {
                    json!({
                        "index": f.index,
                        "pair_id": f.pair_id,
                        "stage": f.stage.map(|s| s.to_string()),
                        "error": f.error.to_string(),
                    })
                })
                .collect(),
        )
    }
}

/// Runs every pair, up to `in_flight_cap` pairs at a time. A failing pair is
/// recorded with its stage and never stops the batch.
pub fn run_batch(
    config: &PipelineConfig,
    pairs: &[CounterfactualPair],
    schema: &FeatureSchema,
) -> Result<BatchReport, PipelineError> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(PipelineError::NoPairs);
    }
    let results = bounded_map(pairs.len(), config.in_flight_cap, |i| run_indexed(config, i, &pairs[i], schema));
    Ok(collect_report(pairs, results))
}

type RunFn<'a> = dyn Fn() -> Result<NarrativeRecord, PipelineError> + 'a;

/// Runs pairs one at a time, handing each run to `hook` to execute (e.g.
/// under a power sampler).
pub(crate) fn run_batch_sequential_with(
    config: &PipelineConfig,
    pairs: &[CounterfactualPair],
    schema: &FeatureSchema,
    mut hook: impl FnMut(usize, &RunFn<'_>) -> Result<NarrativeRecord, PipelineError>,
) -> Result<BatchReport, PipelineError> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(PipelineError::NoPairs);
    }
    let results = (0..pairs.len())
        .map(|i| hook(i, &|| run_indexed(config, i, &pairs[i], schema)))
        .collect();
    Ok(collect_report(pairs, results))
}

fn collect_report(pairs: &[CounterfactualPair], results: Vec<Result<NarrativeRecord, PipelineError>>) -> BatchReport {
    let mut report = BatchReport::default();
    for (i, result) in results.into_iter().enumerate() {
        match result {
            Ok(record) => report.records.push(record),
            Err(error) => {
                let stage = match &error {
                    PipelineError::Backend { stage, .. } => Some(*stage),
                    _ => None,
                };
                log::warn!("pair {} failed: {error}", pairs[i].id);
                report.failures.push(StageFailure {
                    index: i,
                    pair_id: pairs[i].id.clone(),
                    stage,
                    error,
                });
            }
        }
    }
    report
}

/// Applies `f` to `0..n` on at most `cap` worker threads; results in index order.
pub(crate) fn bounded_map<T: Send>(n: usize, cap: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..cap.max(1).min(n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let result = f(i);
                slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|r| r.expect("every index is processed"))
        .collect()
}

pub fn write_records(path: impl AsRef<Path>, report: &BatchReport, schema: &FeatureSchema) -> Result<(), PipelineError> {
    let path = path.as_ref();
    let io = |e: std::io::Error| PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(report.to_jsonl(schema).as_bytes()).map_err(io)
}

/// Reads narrative records written by [`write_records`].
pub fn read_records(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<Vec<NarrativeRecord>, PipelineError> {
    let path = path.as_ref();
    let io = |e: std::io::Error| PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut records = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| PipelineError::Format { line: i + 1, message };
        let value: Value = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        records.push(NarrativeRecord::from_json(&value, schema).map_err(fail)?);
    }
    Ok(records)
}
