//! Knowledge-distillation datasets of (prompt, teacher response) pairs.
//!
//! The draft-stage dataset pairs each draft prompt with one teacher reply.
//! The refiner-stage dataset first collects drafts from a drafter model,
//! embeds them in the refiner prompt and pairs that prompt with one teacher
//! reply. Teacher replies are stored with reasoning spans removed; the raw
//! replies go to a sidecar file, and `train_on_raw` swaps them in as targets.
//!
//! On disk a dataset at `name.jsonl` is accompanied by
//! `name.jsonl.manifest.json` and `name.jsonl.raw.jsonl`.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::counterfactual::CounterfactualPair;
use crate::gateway::{strip_reasoning, Gateway};
use crate::pipeline::{bounded_map, chat_request, draft_completions, draft_texts};
use crate::prompt::{render_draft, render_refiner, PromptError, PromptTemplate, Stage};
use crate::tabular::FeatureSchema;

#[derive(Debug, Error)]
pub enum KdError {
    #[error("no pairs to build from")]
    NoPairs,
    #[error("prompt error: {0}")]
    Prompt(#[from] PromptError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path} line {line}: {message}")]
    Format { path: String, line: usize, message: String },
    #[error("{path} line {line}: stage {found} differs from dataset stage {expected}")]
    StageMismatch {
        path: String,
        line: usize,
        expected: Stage,
        found: Stage,
    },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KdExample {
    pub prompt: String,
    pub response: String,
    pub pair_id: String,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawResponse {
    pub pair_id: String,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub pair_id: String,
    /// Which call failed: "draft" or "teacher".
    pub step: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdManifest {
    pub stage: Stage,
    pub teacher: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drafter: Option<String>,
    /// How the drafter was chosen, e.g. "weakest".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drafter_selection: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_drafts: Option<usize>,
    pub draft_template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refiner_template: Option<String>,
    pub n_pairs: usize,
    pub n_examples: usize,
    pub skipped: Vec<SkippedPair>,
    /// Responses are the raw teacher output rather than the cleaned text.
    pub train_on_raw: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdDataset {
    pub stage: Stage,
    pub examples: Vec<KdExample>,
    /// Raw teacher replies, one per example, in the same order.
    pub raw: Vec<RawResponse>,
    pub manifest: KdManifest,
}

#[derive(Debug, Clone, Default)]
pub struct KdOptions {
    pub train_on_raw: bool,
    /// Pairs processed concurrently.
    pub in_flight_cap: usize,
    pub drafter_selection: Option<String>,
    pub created_at: Option<String>,
}

struct Built {
    example: KdExample,
    raw: RawResponse,
}

fn query_teacher(
    teacher: &Gateway,
    prompt: &crate::prompt::RenderedPrompt,
    stage: Stage,
    train_on_raw: bool,
) -> Result<Built, SkippedPair> {
    let skip = |error: String| SkippedPair {
        pair_id: prompt.pair_id.clone(),
        step: "teacher".into(),
        error,
    };
    let completion = teacher
        .complete(&chat_request(prompt, "teacher", 0))
        .map_err(|e| skip(e.to_string()))?;
    let raw = completion.raw_text;
    let response = if train_on_raw { raw.clone() } else { strip_reasoning(&raw) };
    if response.trim().is_empty() {
        return Err(skip("teacher response is empty after removing reasoning".into()));
    }
    Ok(Built {
        example: KdExample {
            prompt: prompt.full_text(),
            response,
            pair_id: prompt.pair_id.clone(),
            stage,
        },
        raw: RawResponse {
            pair_id: prompt.pair_id.clone(),
            raw,
        },
    })
}

fn assemble(
    stage: Stage,
    results: Vec<Result<Built, SkippedPair>>,
    manifest: KdManifest,
) -> KdDataset {
    let mut examples = Vec::new();
    let mut raw = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(b) => {
                examples.push(b.example);
                raw.push(b.raw);
            }
            Err(s) => {
                log::warn!("skipping pair {}: {} failed: {}", s.pair_id, s.step, s.error);
                skipped.push(s);
            }
        }
    }
    let manifest = KdManifest {
        n_examples: examples.len(),
        skipped,
        ..manifest
    };
    KdDataset {
        stage,
        examples,
        raw,
        manifest,
    }
}

/// One draft prompt and one teacher reply per pair.
pub fn build_draft_dataset(
    teacher: &Gateway,
    pairs: &[CounterfactualPair],
    template: &PromptTemplate,
    schema: &FeatureSchema,
    options: &KdOptions,
) -> Result<KdDataset, KdError> {
    if pairs.is_empty() {
        return Err(KdError::NoPairs);
    }
    let prompts = pairs
        .iter()
        .map(|p| render_draft(template, p, schema))
        .collect::<Result<Vec<_>, _>>()?;
    let results = bounded_map(pairs.len(), options.in_flight_cap, |i| {
        query_teacher(teacher, &prompts[i], Stage::Draft, options.train_on_raw)
    });
    let manifest = KdManifest {
        stage: Stage::Draft,
        teacher: teacher.identity(),
        drafter: None,
        drafter_selection: None,
        n_drafts: None,
        draft_template: template.body.clone(),
        refiner_template: None,
        n_pairs: pairs.len(),
        n_examples: 0,
        skipped: Vec::new(),
        train_on_raw: options.train_on_raw,
        created_at: options.created_at.clone(),
    };
    Ok(assemble(Stage::Draft, results, manifest))
}

/// Drafts from `drafter`, merged by `teacher`, one example per pair.
#[allow(clippy::too_many_arguments)]
pub fn build_refiner_dataset(
    teacher: &Gateway,
    drafter: &Gateway,
    pairs: &[CounterfactualPair],
    draft_template: &PromptTemplate,
    refiner_template: &PromptTemplate,
    schema: &FeatureSchema,
    n_drafts: usize,
    options: &KdOptions,
) -> Result<KdDataset, KdError> {
    if pairs.is_empty() {
        return Err(KdError::NoPairs);
    }
    if n_drafts == 0 || refiner_template.n_drafts() != n_drafts {
        return Err(KdError::Config(format!(
            "refiner template has {} draft slots but n_drafts is {n_drafts}",
            refiner_template.n_drafts()
        )));
    }
    let draft_prompts = pairs
        .iter()
        .map(|p| render_draft(draft_template, p, schema))
        .collect::<Result<Vec<_>, _>>()?;
    let results = bounded_map(pairs.len(), options.in_flight_cap, |i| {
        let drafts = draft_completions(drafter, &draft_prompts[i], n_drafts).map_err(|e| SkippedPair {
            pair_id: pairs[i].id.clone(),
            step: "draft".into(),
            error: e.to_string(),
        })?;
        let raw: Vec<String> = drafts.into_iter().map(|c| c.raw_text).collect();
        let prompt = render_refiner(refiner_template, &pairs[i], schema, &draft_texts(&raw)).map_err(|e| SkippedPair {
            pair_id: pairs[i].id.clone(),
            step: "draft".into(),
            error: e.to_string(),
        })?;
        query_teacher(teacher, &prompt, Stage::Refiner, options.train_on_raw)
    });
    let manifest = KdManifest {
        stage: Stage::Refiner,
        teacher: teacher.identity(),
        drafter: Some(drafter.identity()),
        drafter_selection: options.drafter_selection.clone(),
        n_drafts: Some(n_drafts),
        draft_template: draft_template.body.clone(),
        refiner_template: Some(refiner_template.body.clone()),
        n_pairs: pairs.len(),
        n_examples: 0,
        skipped: Vec::new(),
        train_on_raw: options.train_on_raw,
        created_at: options.created_at.clone(),
    };
    Ok(assemble(Stage::Refiner, results, manifest))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

pub fn manifest_path(path: impl AsRef<Path>) -> PathBuf {
    sidecar(path.as_ref(), ".manifest.json")
}

pub fn raw_path(path: impl AsRef<Path>) -> PathBuf {
    sidecar(path.as_ref(), ".raw.jsonl")
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> KdError + '_ {
    move |e| KdError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}

/// Writes examples, manifest and raw sidecar.
pub fn write_jsonl(dataset: &KdDataset, path: impl AsRef<Path>) -> Result<(), KdError> {
    let path = path.as_ref();
    let write = |p: &Path, text: &str| -> Result<(), KdError> {
        let mut f = std::fs::File::create(p).map_err(io_err(p))?;
        f.write_all(text.as_bytes()).map_err(io_err(p))
    };
    write(path, &jsonl(&dataset.examples))?;
    write(&raw_path(path), &jsonl(&dataset.raw))?;
    let manifest = serde_json::to_string_pretty(&dataset.manifest).expect("serializable");
    write(&manifest_path(path), &(manifest + "\n"))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>, KdError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| KdError::Format {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, item));
    }
    Ok(out)
}

/// Reads a dataset written by [`write_jsonl`]. The manifest is required; the
/// raw sidecar is optional.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<KdDataset, KdError> {
    let path = path.as_ref();
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: KdManifest = serde_json::from_str(&text).map_err(|e| KdError::Format {
        path: mpath.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let stage = manifest.stage;
    let mut examples = Vec::new();
    for (line, v) in read_lines::<Value>(path)? {
        let example: KdExample = serde_json::from_value(v).map_err(|e| KdError::Format {
            path: path.display().to_string(),
            line,
            message: e.to_string(),
        })?;
        if example.stage != stage {
            return Err(KdError::StageMismatch {
                path: path.display().to_string(),
                line,
                expected: stage,
                found: example.stage,
            });
        }
        if example.prompt.is_empty() || example.response.is_empty() {
            return Err(KdError::Format {
                path: path.display().to_string(),
                line,
                message: "prompt and response must be non-empty".into(),
            });
        }
        examples.push(example);
    }
    let rpath = raw_path(path);
    let raw = if rpath.exists() {
        read_lines::<RawResponse>(&rpath)?.into_iter().map(|(_, r)| r).collect()
    } else {
        Vec::new()
    };
    Ok(KdDataset {
        stage,
        examples,
        raw,
        manifest,
    })
}
