//! Typed tabular data: feature schemas, instances and labelled datasets.
//!
//! Categorical values are encoded ordinally, by their position in the
//! declared admissible list. The declared order is therefore part of the
//! schema contract: reordering a list changes every encoded instance and
//! every trained tree.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TabularError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("header mismatch: missing columns {missing:?}, unexpected columns {unexpected:?}")]
    HeaderMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("row {row}, column {column:?}: value {value:?} {reason}")]
    InvalidValue {
        row: usize,
        column: String,
        value: String,
        reason: String,
    },
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("invalid instance: feature {feature:?} value {value:?} {reason}")]
    InvalidInstance {
        feature: String,
        value: String,
        reason: String,
    },
    #[error("schema file {path}: {message}")]
    SchemaFile { path: PathBuf, message: String },
}

/// The admissible domain of a single feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Categorical {
        values: Vec<String>,
    },
    Numeric {
        min: f64,
        max: f64,
        #[serde(default)]
        integer: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    /// Human-facing name used in prompts, e.g. "marital status" for `marital_status`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(flatten)]
    pub kind: FeatureKind,
    /// Whether the counterfactual search may alter this feature.
    #[serde(default = "default_true")]
    pub mutable: bool,
}

fn default_true() -> bool {
    true
}

impl FeatureSpec {
    pub fn categorical<S: Into<String>>(name: &str, values: impl IntoIterator<Item = S>) -> Self {
        Self {
            name: name.to_string(),
            label: None,
            kind: FeatureKind::Categorical {
                values: values.into_iter().map(Into::into).collect(),
            },
            mutable: true,
        }
    }

    pub fn numeric(name: &str, min: f64, max: f64, integer: bool) -> Self {
        Self {
            name: name.to_string(),
            label: None,
            kind: FeatureKind::Numeric { min, max, integer },
            mutable: true,
        }
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.label = Some(label.to_string());
        self
    }

    pub fn immutable(mut self) -> Self {
        self.mutable = false;
        self
    }

    pub fn display_name(&self) -> &str {
        self.label.as_deref().unwrap_or(&self.name)
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, FeatureKind::Categorical { .. })
    }

    fn validate(&self) -> Result<(), TabularError> {
        if self.name.trim().is_empty() {
            return Err(TabularError::Schema("feature with empty name".into()));
        }
        match &self.kind {
            FeatureKind::Categorical { values } => {
                if values.is_empty() {
                    return Err(TabularError::Schema(format!(
                        "categorical feature {:?} has no admissible values",
                        self.name
                    )));
                }
                let mut seen = HashSet::new();
                for v in values {
                    if !seen.insert(v.as_str()) {
                        return Err(TabularError::Schema(format!(
                            "categorical feature {:?} lists {:?} twice",
                            self.name, v
                        )));
                    }
                }
            }
            FeatureKind::Numeric { min, max, .. } => {
                if !(min.is_finite() && max.is_finite()) || min > max {
                    return Err(TabularError::Schema(format!(
                        "numeric feature {:?} has invalid bounds [{min}, {max}]",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Parses and validates one textual cell.
    pub fn parse_value(&self, raw: &str) -> Result<FeatureValue, String> {
        let raw = raw.trim();
        if raw.is_empty() {
            return Err("is missing".into());
        }
        let value = match &self.kind {
            FeatureKind::Categorical { .. } => FeatureValue::Categorical(raw.to_string()),
            FeatureKind::Numeric { .. } => match raw.parse::<f64>() {
                Ok(x) => FeatureValue::Numeric(x),
                Err(_) => return Err("is not a number".into()),
            },
        };
        self.check(&value)?;
        Ok(value)
    }

    /// Checks a value against this feature's domain.
    pub fn check(&self, value: &FeatureValue) -> Result<(), String> {
        match (&self.kind, value) {
            (FeatureKind::Categorical { values }, FeatureValue::Categorical(v)) => {
                if values.iter().any(|a| a == v) {
                    Ok(())
                } else {
                    Err(format!("is not one of {values:?}"))
                }
            }
            (FeatureKind::Numeric { min, max, integer }, FeatureValue::Numeric(x)) => {
                if !x.is_finite() {
                    Err("is not finite".into())
                } else if x < min || x > max {
                    Err(format!("is outside [{min}, {max}]"))
                } else if *integer && x.fract() != 0.0 {
                    Err("is not an integer".into())
                } else {
                    Ok(())
                }
            }
            (FeatureKind::Categorical { .. }, FeatureValue::Numeric(_)) => {
                Err("is numeric but the feature is categorical".into())
            }
            (FeatureKind::Numeric { .. }, FeatureValue::Categorical(_)) => {
                Err("is text but the feature is numeric".into())
            }
        }
    }

    /// Ordinal code for categoricals, pass-through for numerics.
    pub fn encode(&self, value: &FeatureValue) -> f64 {
        match (&self.kind, value) {
            (FeatureKind::Categorical { values }, FeatureValue::Categorical(v)) => values
                .iter()
                .position(|a| a == v)
                .expect("categorical value validated against schema") as f64,
            (_, FeatureValue::Numeric(x)) => *x,
            (FeatureKind::Numeric { .. }, FeatureValue::Categorical(v)) => {
                panic!("feature {:?}: text value {v:?} for numeric feature", self.name)
            }
        }
    }
}

/// A single cell value.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureValue {
    Categorical(String),
    Numeric(f64),
}

impl FeatureValue {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            FeatureValue::Categorical(s) => Some(s),
            FeatureValue::Numeric(_) => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            FeatureValue::Numeric(x) => Some(*x),
            FeatureValue::Categorical(_) => None,
        }
    }

    /// JSON form: strings for categoricals, numbers (integral when possible) for numerics.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            FeatureValue::Categorical(s) => serde_json::Value::String(s.clone()),
            FeatureValue::Numeric(x) => number_to_json(*x),
        }
    }
}

impl fmt::Display for FeatureValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureValue::Categorical(s) => f.write_str(s),
            FeatureValue::Numeric(x) => f.write_str(&format_number(*x)),
        }
    }
}

/// Formats a real without a trailing `.0` for integral values.
pub fn format_number(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 9.0e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

pub(crate) fn number_to_json(x: f64) -> serde_json::Value {
    if x.fract() == 0.0 && x.abs() < 9.0e15 {
        serde_json::Value::from(x as i64)
    } else {
        serde_json::Number::from_f64(x)
            .map(serde_json::Value::Number)
            .unwrap_or(serde_json::Value::Null)
    }
}

/// One row of feature values, aligned 1:1 with the schema's features.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub values: Vec<FeatureValue>,
}

impl Instance {
    pub fn new(values: Vec<FeatureValue>) -> Self {
        Self { values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    #[serde(default)]
    pub name: String,
    /// Free-text description of the dataset, used in prompts.
    #[serde(default)]
    pub description: String,
    pub features: Vec<FeatureSpec>,
    pub target: String,
    pub target_labels: [String; 2],
    /// Optional readable meaning of each class, e.g. `["<=50K", ">50K"]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome_descriptions: Option<[String; 2]>,
}

impl FeatureSchema {
    pub fn new(
        features: Vec<FeatureSpec>,
        target: &str,
        target_labels: [&str; 2],
    ) -> Result<Self, TabularError> {
        let schema = Self {
            name: String::new(),
            description: String::new(),
            features,
            target: target.to_string(),
            target_labels: target_labels.map(str::to_string),
            outcome_descriptions: None,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), TabularError> {
        if self.features.is_empty() {
            return Err(TabularError::Schema("schema has no features".into()));
        }
        let mut names = HashSet::new();
        for f in &self.features {
            f.validate()?;
            if !names.insert(f.name.as_str()) {
                return Err(TabularError::Schema(format!("duplicate feature {:?}", f.name)));
            }
        }
        if names.contains(self.target.as_str()) {
            return Err(TabularError::Schema(format!(
                "target {:?} is also a feature",
                self.target
            )));
        }
        if self.target_labels[0] == self.target_labels[1] {
            return Err(TabularError::Schema("target labels must differ".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, TabularError> {
        let schema: FeatureSchema =
            toml::from_str(text).map_err(|e| TabularError::Schema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self, TabularError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TabularError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|e| TabularError::SchemaFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schema serialises to TOML")
    }

    /// Number of features, `k`.
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        let label = label.trim();
        self.target_labels.iter().position(|l| l == label)
    }

    pub fn validate_instance(&self, instance: &Instance) -> Result<(), TabularError> {
        if instance.values.len() != self.features.len() {
            return Err(TabularError::InvalidInstance {
                feature: String::new(),
                value: String::new(),
                reason: format!(
                    "has {} values but the schema has {} features",
                    instance.values.len(),
                    self.features.len()
                ),
            });
        }
        for (spec, value) in self.features.iter().zip(&instance.values) {
            spec.check(value).map_err(|reason| TabularError::InvalidInstance {
                feature: spec.name.clone(),
                value: value.to_string(),
                reason,
            })?;
        }
        Ok(())
    }

    /// Parses an instance from one textual cell per feature, in schema order.
    pub fn parse_instance(&self, cells: &[&str]) -> Result<Instance, TabularError> {
        if cells.len() != self.features.len() {
            return Err(TabularError::InvalidInstance {
                feature: String::new(),
                value: cells.join(","),
                reason: format!("expected {} cells", self.features.len()),
            });
        }
        let values = self
            .features
            .iter()
            .zip(cells)
            .map(|(spec, raw)| {
                spec.parse_value(raw).map_err(|reason| TabularError::InvalidInstance {
                    feature: spec.name.clone(),
                    value: raw.to_string(),
                    reason,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Instance { values })
    }

    /// Parses an instance from a JSON object keyed by feature name.
    pub fn instance_from_json(&self, value: &serde_json::Value) -> Result<Instance, TabularError> {
        let obj = value.as_object().ok_or_else(|| TabularError::InvalidInstance {
            feature: String::new(),
            value: value.to_string(),
            reason: "is not an object".into(),
        })?;
        let mut values = Vec::with_capacity(self.features.len());
        for spec in &self.features {
            let cell = obj.get(&spec.name).ok_or_else(|| TabularError::InvalidInstance {
                feature: spec.name.clone(),
                value: String::new(),
                reason: "is missing".into(),
            })?;
            let text = match cell {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Number(n) => n.to_string(),
                other => other.to_string(),
            };
            let parsed = spec.parse_value(&text).map_err(|reason| TabularError::InvalidInstance {
                feature: spec.name.clone(),
                value: text.clone(),
                reason,
            })?;
            values.push(parsed);
        }
        Ok(Instance { values })
    }

    /// JSON object keyed by feature name, in schema order.
    pub fn instance_to_json(&self, instance: &Instance) -> serde_json::Value {
        let map = self
            .features
            .iter()
            .zip(&instance.values)
            .map(|(spec, v)| (spec.name.clone(), v.to_json()))
            .collect::<serde_json::Map<_, _>>();
        serde_json::Value::Object(map)
    }
}

/// Maps an instance to a real vector of length `k`.
pub fn encode(instance: &Instance, schema: &FeatureSchema) -> Vec<f64> {
    schema
        .features
        .iter()
        .zip(&instance.values)
        .map(|(spec, v)| spec.encode(v))
        .collect()
}

/// Rows, class labels (as indices into `schema.target_labels`) and the shared schema.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub schema: Arc<FeatureSchema>,
    pub rows: Vec<Instance>,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(
        schema: Arc<FeatureSchema>,
        rows: Vec<Instance>,
        labels: Vec<usize>,
    ) -> Result<Self, TabularError> {
        if rows.len() != labels.len() {
            return Err(TabularError::Schema(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(TabularError::Schema(format!("label index {bad} is not binary")));
        }
        for row in &rows {
            schema.validate_instance(row)?;
        }
        Ok(Self { schema, rows, labels })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn label_str(&self, i: usize) -> &str {
        &self.schema.target_labels[self.labels[i]]
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            schema: Arc::clone(&self.schema),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Seeded random split; returns `(train, test)` with `round(n * test_fraction)` test rows.
    pub fn split(&self, test_fraction: f64, seed: u64) -> (LabeledDataset, LabeledDataset) {
        let n = self.len();
        let n_test = ((n as f64) * test_fraction.clamp(0.0, 1.0)).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (test, train) = order.split_at(n_test);
        (self.subset(train), self.subset(test))
    }

    /// Per-feature observed range (max - min) over the rows, for numeric features.
    pub fn numeric_ranges(&self) -> Vec<Option<f64>> {
        self.schema
            .features
            .iter()
            .enumerate()
            .map(|(j, spec)| {
                if spec.is_categorical() {
                    return None;
                }
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for row in &self.rows {
                    let x = row.values[j].as_f64().unwrap_or(0.0);
                    lo = lo.min(x);
                    hi = hi.max(x);
                }
                Some(if lo.is_finite() { hi - lo } else { 0.0 })
            })
            .collect()
    }
}

/// Loads a labelled CSV file. Column order is free; names must match exactly.
pub fn load_csv(path: impl AsRef<Path>, schema: Arc<FeatureSchema>) -> Result<LabeledDataset, TabularError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| TabularError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: Arc<FeatureSchema>) -> Result<LabeledDataset, TabularError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();

    let mut expected: Vec<&str> = schema.features.iter().map(|f| f.name.as_str()).collect();
    expected.push(&schema.target);
    let positions: HashMap<&str, usize> =
        headers.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let missing: Vec<String> = expected
        .iter()
        .filter(|e| !positions.contains_key(*e))
        .map(|e| e.to_string())
        .collect();
    let unexpected: Vec<String> = headers
        .iter()
        .filter(|h| !expected.contains(&h.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() || headers.len() != expected.len() {
        return Err(TabularError::HeaderMismatch { missing, unexpected });
    }
    let columns: Vec<usize> = schema.features.iter().map(|f| positions[f.name.as_str()]).collect();
    let target_col = positions[schema.target.as_str()];

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let mut values = Vec::with_capacity(columns.len());
        for (spec, &col) in schema.features.iter().zip(&columns) {
            let raw = record.get(col).unwrap_or("");
            let value = spec.parse_value(raw).map_err(|reason| TabularError::InvalidValue {
                row,
                column: spec.name.clone(),
                value: raw.to_string(),
                reason,
            })?;
            values.push(value);
        }
        let raw_label = record.get(target_col).unwrap_or("");
        let label = schema.label_index(raw_label).ok_or_else(|| TabularError::InvalidValue {
            row,
            column: schema.target.clone(),
            value: raw_label.to_string(),
            reason: format!("is not one of {:?}", schema.target_labels),
        })?;
        rows.push(Instance { values });
        labels.push(label);
    }
    Ok(LabeledDataset { schema, rows, labels })
}

/// Writes a dataset back as CSV, features in schema order followed by the target.
pub fn write_csv<W: Write>(dataset: &LabeledDataset, writer: W) -> Result<(), TabularError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = dataset.schema.features.iter().map(|f| f.name.as_str()).collect();
    header.push(&dataset.schema.target);
    wtr.write_record(&header)?;
    for (row, &label) in dataset.rows.iter().zip(&dataset.labels) {
        let mut cells: Vec<String> = row.values.iter().map(ToString::to_string).collect();
        cells.push(dataset.schema.target_labels[label].clone());
        wtr.write_record(&cells)?;
    }
    wtr.flush().map_err(|source| TabularError::Io {
        path: PathBuf::from("<writer>"),
        source,
    })?;
    Ok(())
}

/// Built-in schemas for the bundled datasets.
pub mod presets {
    use super::{FeatureSchema, FeatureSpec};

    /// Adult census income, 8 features with coarse category groupings.
    ///
    /// Groupings follow `scripts/prepare_data.py`: workclass folded into four
    /// groups, occupation into six, education below high school into
    /// "School", and marital status into five. Category lists are ordered
    /// by socio-economic level rather than alphabetically, which is what the
    /// ordinal encoding splits on.
    pub fn adult() -> FeatureSchema {
        let features = vec![
            FeatureSpec::numeric("age", 17.0, 90.0, true),
            FeatureSpec::categorical(
                "workclass",
                ["Other/Unknown", "Private", "Government", "Self-Employed"],
            ),
            FeatureSpec::categorical(
                "education",
                [
                    "School",
                    "HS-grad",
                    "Some-college",
                    "Assoc",
                    "Bachelors",
                    "Masters",
                    "Prof-school",
                    "Doctorate",
                ],
            ),
            FeatureSpec::categorical(
                "marital_status",
                ["Single", "Separated", "Divorced", "Widowed", "Married"],
            )
            .with_label("marital status"),
            FeatureSpec::categorical(
                "occupation",
                [
                    "Other/Unknown",
                    "Service",
                    "Blue-Collar",
                    "Sales",
                    "White-Collar",
                    "Professional",
                ],
            ),
            FeatureSpec::categorical("race", ["Other", "White"]),
            FeatureSpec::categorical("gender", ["Female", "Male"]),
            FeatureSpec::numeric("hours_per_week", 1.0, 99.0, true).with_label("hours per week"),
        ];
        FeatureSchema {
            name: "adult".into(),
            description: "The Adult census dataset. Each row describes a person; the classifier \
                          predicts whether their yearly income exceeds 50K USD (income = 1) or \
                          not (income = 0)."
                .into(),
            features,
            target: "income".into(),
            target_labels: ["0".into(), "1".into()],
            outcome_descriptions: Some(["<=50K".into(), ">50K".into()]),
        }
    }

    /// Titanic passengers with a known age.
    pub fn titanic() -> FeatureSchema {
        let features = vec![
            FeatureSpec::categorical("pclass", ["1st", "2nd", "3rd"]).with_label("passenger class"),
            FeatureSpec::categorical("sex", ["female", "male"]),
            FeatureSpec::numeric("age", 0.0, 80.0, false),
            FeatureSpec::numeric("sibsp", 0.0, 8.0, true).with_label("siblings or spouses aboard"),
            FeatureSpec::numeric("parch", 0.0, 9.0, true).with_label("parents or children aboard"),
        ];
        FeatureSchema {
            name: "titanic".into(),
            description: "The Titanic passenger list. Each row describes a passenger; the \
                          classifier predicts whether they survived the sinking (survived = 1) \
                          or not (survived = 0)."
                .into(),
            features,
            target: "survived".into(),
            target_labels: ["0".into(), "1".into()],
            outcome_descriptions: Some(["did not survive".into(), "survived".into()]),
        }
    }

    pub fn by_name(name: &str) -> Option<FeatureSchema> {
        match name {
            "adult" => Some(adult()),
            "titanic" => Some(titanic()),
            _ => None,
        }
    }
}
