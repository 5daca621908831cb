//! Draft and refiner prompt templates.
//!
//! A template body contains named placeholders in braces. Required ones are
//! `{factual_block}`, `{counterfactual_block}` and `{outcome_block}`, plus
//! `{draft_1}` .. `{draft_N}` for refiner templates; `{dataset_description}`
//! and `{output_contract}` are optional. Each placeholder present must appear
//! exactly once. Substitution is a single pass, so text inserted for one
//! placeholder is never re-scanned.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counterfactual::CounterfactualPair;
use crate::tabular::{FeatureSchema, Instance};

pub const FACTUAL_HEADER: &str = "Factual instance:";
pub const COUNTERFACTUAL_HEADER: &str = "Counterfactual instance:";
pub const FACTUAL_OUTCOME_PREFIX: &str = "Factual outcome:";
pub const COUNTERFACTUAL_OUTCOME_PREFIX: &str = "Counterfactual outcome:";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptError {
    #[error("template is for the {template} stage but {requested} was requested")]
    StageMismatch { template: Stage, requested: Stage },
    #[error("placeholder {{{0}}} is missing from the template")]
    MissingPlaceholder(String),
    #[error("placeholder {{{0}}} appears {1} times; expected once")]
    DuplicatePlaceholder(String, usize),
    #[error("placeholder {{{0}}} is not valid for this stage")]
    UnexpectedPlaceholder(String),
    #[error("expected {expected} drafts, got {got}")]
    DraftCount { expected: usize, got: usize },
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Draft,
    Refiner,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Draft => "draft",
            Stage::Refiner => "refiner",
        })
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "draft" => Ok(Stage::Draft),
            "refiner" => Ok(Stage::Refiner),
            other => Err(format!("unknown stage {other:?}; expected draft or refiner")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub stage: Stage,
    pub system_preamble: String,
    /// Replaces `{dataset_description}`; when empty the schema description is used.
    #[serde(default)]
    pub dataset_description: String,
    pub output_contract: String,
    pub body: String,
}

pub const DEFAULT_SYSTEM_PREAMBLE: &str = "You explain the decisions of a machine learning \
classifier on tabular data by contrasting an instance with a counterfactual: a minimally \
changed copy of it that the classifier assigns to the other outcome. Be precise, and never \
invent or alter feature values.";

pub const DEFAULT_OUTPUT_CONTRACT: &str = "Finish your reply with a fenced ```json code block \
containing a single JSON object with exactly these keys: \"factual\" (an object mapping every \
feature, named exactly as listed above, to its factual value), \"counterfactual\" (the same \
for the counterfactual instance), \"factual_outcome\" (0 or 1), \"counterfactual_outcome\" \
(0 or 1) and \"narrative\" (your explanation as a string). Copy values verbatim. Write \
nothing after the code block.";

const DRAFT_BODY: &str = "{dataset_description}

A classifier assigned the factual instance below to one outcome. The counterfactual \
instance differs from it in a few features and is assigned the other outcome.

{factual_block}

{counterfactual_block}

{outcome_block}

Write a short narrative that explains how the features that differ between the two \
instances lead to the change in outcome.

{output_contract}";

const REFINER_INTRO: &str = "{dataset_description}

Several draft explanations were written independently for the pair of instances below. \
They may disagree, repeat each other or contain mistakes.

{factual_block}

{counterfactual_block}

{outcome_block}
";

const REFINER_OUTRO: &str = "
Merge the drafts into one narrative. Keep what is correct, check every feature value and \
outcome against the instances above, fix errors and drop repetition.

{output_contract}";

impl PromptTemplate {
    /// Default draft template.
    pub fn default_draft() -> Self {
        Self {
            stage: Stage::Draft,
            system_preamble: DEFAULT_SYSTEM_PREAMBLE.into(),
            dataset_description: String::new(),
            output_contract: DEFAULT_OUTPUT_CONTRACT.into(),
            body: DRAFT_BODY.into(),
        }
    }

    /// Default refiner template with `n_drafts` draft slots.
    pub fn default_refiner(n_drafts: usize) -> Self {
        let mut body = String::from(REFINER_INTRO);
        for i in 1..=n_drafts {
            body.push_str(&format!("\nDraft {i}:\n{{draft_{i}}}\n"));
        }
        body.push_str(REFINER_OUTRO);
        Self {
            stage: Stage::Refiner,
            system_preamble: DEFAULT_SYSTEM_PREAMBLE.into(),
            dataset_description: String::new(),
            output_contract: DEFAULT_OUTPUT_CONTRACT.into(),
            body,
        }
    }

    /// Template whose body is read from a plain-text file; other fields take defaults.
    pub fn from_body_file(stage: Stage, path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path).map_err(|e| PromptError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut t = match stage {
            Stage::Draft => Self::default_draft(),
            Stage::Refiner => Self::default_refiner(0),
        };
        t.body = body;
        t.validate()?;
        Ok(t)
    }

    /// Number of `{draft_i}` slots (0 for draft templates).
    pub fn n_drafts(&self) -> usize {
        placeholders(&self.body)
            .iter()
            .filter(|p| draft_index(&p.name).is_some())
            .count()
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let found = placeholders(&self.body);
        let count = |name: &str| found.iter().filter(|p| p.name == name).count();
        for name in ["factual_block", "counterfactual_block", "outcome_block"] {
            match count(name) {
                0 => return Err(PromptError::MissingPlaceholder(name.into())),
                1 => {}
                n => return Err(PromptError::DuplicatePlaceholder(name.into(), n)),
            }
        }
        for name in ["dataset_description", "output_contract"] {
            if count(name) > 1 {
                return Err(PromptError::DuplicatePlaceholder(name.into(), count(name)));
            }
        }
        let drafts: Vec<usize> = found.iter().filter_map(|p| draft_index(&p.name)).collect();
        match self.stage {
            Stage::Draft => {
                if let Some(i) = drafts.first() {
                    return Err(PromptError::UnexpectedPlaceholder(format!("draft_{i}")));
                }
            }
            Stage::Refiner => {
                if drafts.is_empty() {
                    return Err(PromptError::MissingPlaceholder("draft_1".into()));
                }
                let n = drafts.len();
                for i in 1..=n {
                    let c = drafts.iter().filter(|&&d| d == i).count();
                    if c == 0 {
                        return Err(PromptError::MissingPlaceholder(format!("draft_{i}")));
                    }
                    if c > 1 {
                        return Err(PromptError::DuplicatePlaceholder(format!("draft_{i}"), c));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    /// System message.
    pub system: String,
    /// User message.
    pub text: String,
    pub stage: Stage,
    pub pair_id: String,
}

impl RenderedPrompt {
    /// System and user text joined, as stored in distillation datasets.
    pub fn full_text(&self) -> String {
        if self.system.is_empty() {
            self.text.clone()
        } else {
            format!("{}\n\n{}", self.system, self.text)
        }
    }
}

/// `"name: value"` lines in schema order under a header.
pub fn instance_block(header: &str, instance: &Instance, schema: &FeatureSchema) -> String {
    let mut out = String::from(header);
    for (spec, value) in schema.features.iter().zip(&instance.values) {
        out.push('\n');
        out.push_str(spec.display_name());
        out.push_str(": ");
        out.push_str(&value.to_string());
    }
    out
}

fn outcome_text(schema: &FeatureSchema, y: usize) -> String {
    match &schema.outcome_descriptions {
        Some(d) => format!("{} ({})", schema.target_labels[y], d[y]),
        None => schema.target_labels[y].clone(),
    }
}

pub fn outcome_block(pair: &CounterfactualPair, schema: &FeatureSchema) -> String {
    format!(
        "{FACTUAL_OUTCOME_PREFIX} {target} = {}\n{COUNTERFACTUAL_OUTCOME_PREFIX} {target} = {}",
        outcome_text(schema, pair.y_fact),
        outcome_text(schema, pair.y_cf),
        target = schema.target,
    )
}

pub fn render_draft(
    template: &PromptTemplate,
    pair: &CounterfactualPair,
    schema: &FeatureSchema,
) -> Result<RenderedPrompt, PromptError> {
    check_stage(template, Stage::Draft)?;
    render(template, pair, schema, &[])
}

/// Embeds `drafts` verbatim, in order.
pub fn render_refiner<S: AsRef<str>>(
    template: &PromptTemplate,
    pair: &CounterfactualPair,
    schema: &FeatureSchema,
    drafts: &[S],
) -> Result<RenderedPrompt, PromptError> {
    check_stage(template, Stage::Refiner)?;
    let expected = template.n_drafts();
    if drafts.len() != expected {
        return Err(PromptError::DraftCount {
            expected,
            got: drafts.len(),
        });
    }
    let drafts: Vec<&str> = drafts.iter().map(AsRef::as_ref).collect();
    render(template, pair, schema, &drafts)
}

fn check_stage(template: &PromptTemplate, requested: Stage) -> Result<(), PromptError> {
    if template.stage != requested {
        return Err(PromptError::StageMismatch {
            template: template.stage,
            requested,
        });
    }
    template.validate()
}

fn render(
    template: &PromptTemplate,
    pair: &CounterfactualPair,
    schema: &FeatureSchema,
    drafts: &[&str],
) -> Result<RenderedPrompt, PromptError> {
    let description = if template.dataset_description.is_empty() {
        schema.description.as_str()
    } else {
        template.dataset_description.as_str()
    };
    let factual = instance_block(FACTUAL_HEADER, &pair.factual, schema);
    let counterfactual = instance_block(COUNTERFACTUAL_HEADER, &pair.counterfactual, schema);
    let outcomes = outcome_block(pair, schema);
    let body = &template.body;
    let mut text = String::with_capacity(body.len() + 512 + drafts.iter().map(|d| d.len()).sum::<usize>());
    let mut last = 0;
    for p in placeholders(body) {
        text.push_str(&body[last..p.start]);
        let value: &str = match p.name.as_str() {
            "factual_block" => &factual,
            "counterfactual_block" => &counterfactual,
            "outcome_block" => &outcomes,
            "dataset_description" => description,
            "output_contract" => &template.output_contract,
            name => match draft_index(name) {
                Some(i) => drafts[i - 1],
                None => unreachable!("placeholders() only yields known names"),
            },
        };
        text.push_str(value);
        last = p.end;
    }
    text.push_str(&body[last..]);
    Ok(RenderedPrompt {
        system: template.system_preamble.clone(),
        text: text.trim().to_string(),
        stage: template.stage,
        pair_id: pair.id.clone(),
    })
}

struct Placeholder {
    name: String,
    start: usize,
    end: usize,
}

fn is_known(name: &str) -> bool {
    matches!(
        name,
        "factual_block" | "counterfactual_block" | "outcome_block" | "dataset_description" | "output_contract"
    ) || draft_index(name).is_some()
}

fn draft_index(name: &str) -> Option<usize> {
    let n: usize = name.strip_prefix("draft_")?.parse().ok()?;
    (n >= 1).then_some(n)
}

/// Known placeholders in order of appearance. Other brace groups are literal text.
fn placeholders(body: &str) -> Vec<Placeholder> {
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(open) = body[from..].find('{').map(|i| from + i) {
        let Some(close) = body[open + 1..].find(['}', '{']).map(|i| open + 1 + i) else {
            break;
        };
        if body.as_bytes()[close] == b'{' {
            from = close;
            continue;
        }
        let name = &body[open + 1..close];
        if is_known(name) {
            out.push(Placeholder {
                name: name.to_string(),
                start: open,
                end: close + 1,
            });
        }
        from = close + 1;
    }
    out
}
