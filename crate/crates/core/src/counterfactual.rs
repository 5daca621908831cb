//! Minimal-distance counterfactual search against a decision-tree oracle.
//!
//! The prediction of an axis-aligned tree only depends on which side of each
//! split threshold a value falls, so for every feature the closest point of
//! every threshold cell is one of: the factual value itself, a threshold
//! `t` (values `<= t` go left), or `t` plus one resolution step. Categorical
//! features contribute every admissible value. The search enumerates
//! combinations of these per-feature candidates in non-decreasing distance
//! order (best-first over a heap) and stops at the first prediction flip,
//! after draining the rest of that distance shell for deterministic
//! tie-breaking.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde_json::json;
use thiserror::Error;

use crate::oracle::DecisionTree;
use crate::tabular::{encode, FeatureKind, FeatureSchema, FeatureValue, Instance, LabeledDataset};

const SHELL_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("search budget of {expansions} expansions exhausted before a counterfactual was found")]
    BudgetExhausted { expansions: usize },
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("invalid distance configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid counterfactual pair: {0}")]
    InvalidPair(String),
}

/// Weighted mean of per-feature distances: 0/1 mismatch for categoricals,
/// range-normalised absolute difference for numerics.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceConfig {
    pub normalizers: Vec<f64>,
    pub weights: Vec<f64>,
}

pub const NORMALIZER_FLOOR: f64 = 1e-9;

impl DistanceConfig {
    /// Normalisers from the observed ranges of `dataset`.
    pub fn from_dataset(dataset: &LabeledDataset) -> Self {
        let normalizers = dataset
            .numeric_ranges()
            .into_iter()
            .map(|r| r.unwrap_or(1.0).max(NORMALIZER_FLOOR))
            .collect::<Vec<_>>();
        let weights = vec![1.0; normalizers.len()];
        Self { normalizers, weights }
    }

    /// Normalisers from the declared schema bounds.
    pub fn from_schema(schema: &FeatureSchema) -> Self {
        let normalizers = schema
            .features
            .iter()
            .map(|f| match f.kind {
                FeatureKind::Numeric { min, max, .. } => (max - min).max(NORMALIZER_FLOOR),
                FeatureKind::Categorical { .. } => 1.0,
            })
            .collect::<Vec<_>>();
        let weights = vec![1.0; normalizers.len()];
        Self { normalizers, weights }
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self, SearchError> {
        self.weights = weights;
        self.validate(self.normalizers.len())?;
        Ok(self)
    }

    pub fn validate(&self, k: usize) -> Result<(), SearchError> {
        if self.normalizers.len() != k || self.weights.len() != k {
            return Err(SearchError::InvalidConfig(format!(
                "expected {k} normalisers and weights, got {} and {}",
                self.normalizers.len(),
                self.weights.len()
            )));
        }
        if self.normalizers.iter().any(|n| !(*n > 0.0) || !n.is_finite()) {
            return Err(SearchError::InvalidConfig("normalisers must be positive".into()));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(SearchError::InvalidConfig("weights must be non-negative".into()));
        }
        if !self.weights.iter().any(|w| *w > 0.0) {
            return Err(SearchError::InvalidConfig("at least one weight must be positive".into()));
        }
        Ok(())
    }

    fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Unweighted distance on feature `j`.
    fn feature_term(&self, j: usize, a: &FeatureValue, b: &FeatureValue) -> f64 {
        match (a, b) {
            (FeatureValue::Numeric(x), FeatureValue::Numeric(y)) => (x - y).abs() / self.normalizers[j],
            _ => f64::from(u8::from(a != b)),
        }
    }
}

/// `d(a, b)`; symmetric, non-negative, zero iff `a == b` when all weights are positive.
pub fn distance(a: &Instance, b: &Instance, schema: &FeatureSchema, config: &DistanceConfig) -> f64 {
    debug_assert_eq!(a.values.len(), schema.len());
    let sum: f64 = (0..schema.len())
        .map(|j| config.weights[j] * config.feature_term(j, &a.values[j], &b.values[j]))
        .sum();
    sum / config.total_weight()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchBudget {
    pub max_expansions: usize,
    /// `None` means up to `k`.
    pub max_changed_features: Option<usize>,
}

impl Default for SearchBudget {
    fn default() -> Self {
        Self {
            max_expansions: 200_000,
            max_changed_features: None,
        }
    }
}

/// A factual instance, its counterfactual and both oracle outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualPair {
    pub id: String,
    /// Source row in the dataset the factual came from, when known.
    pub row: Option<usize>,
    pub factual: Instance,
    pub counterfactual: Instance,
    /// Class indices into `schema.target_labels`.
    pub y_fact: usize,
    pub y_cf: usize,
    pub changed_features: Vec<String>,
    pub distance: f64,
}

impl CounterfactualPair {
    /// Builds a pair, deriving the changed features and distance.
    pub fn new(
        id: impl Into<String>,
        factual: Instance,
        counterfactual: Instance,
        y_fact: usize,
        y_cf: usize,
        schema: &FeatureSchema,
        config: &DistanceConfig,
    ) -> Result<Self, SearchError> {
        for inst in [&factual, &counterfactual] {
            schema
                .validate_instance(inst)
                .map_err(|e| SearchError::InvalidPair(e.to_string()))?;
        }
        if y_fact == y_cf || y_fact > 1 || y_cf > 1 {
            return Err(SearchError::InvalidPair("outcomes must be distinct binary classes".into()));
        }
        let changed_features = changed_features(&factual, &counterfactual, schema);
        if changed_features.is_empty() {
            return Err(SearchError::InvalidPair("factual and counterfactual are identical".into()));
        }
        let distance = distance(&factual, &counterfactual, schema, config);
        Ok(Self {
            id: id.into(),
            row: None,
            factual,
            counterfactual,
            y_fact,
            y_cf,
            changed_features,
            distance,
        })
    }

    /// Re-checks validity against an oracle: both outcomes must match its predictions.
    pub fn is_valid_for(&self, oracle: &DecisionTree) -> bool {
        oracle.predict(&self.factual) == self.y_fact
            && oracle.predict(&self.counterfactual) == self.y_cf
            && self.y_fact != self.y_cf
    }

    pub fn to_json(&self, schema: &FeatureSchema) -> serde_json::Value {
        json!({
            "id": self.id,
            "row": self.row,
            "factual": schema.instance_to_json(&self.factual),
            "counterfactual": schema.instance_to_json(&self.counterfactual),
            "y_fact": schema.target_labels[self.y_fact],
            "y_cf": schema.target_labels[self.y_cf],
            "changed_features": self.changed_features,
            "distance": self.distance,
        })
    }

    pub fn from_json(value: &serde_json::Value, schema: &FeatureSchema) -> Result<Self, SearchError> {
        let bad = |m: &str| SearchError::InvalidPair(m.to_string());
        let id = value["id"].as_str().ok_or_else(|| bad("missing id"))?.to_string();
        let row = value["row"].as_u64().map(|r| r as usize);
        let factual = schema
            .instance_from_json(&value["factual"])
            .map_err(|e| bad(&format!("factual: {e}")))?;
        let counterfactual = schema
            .instance_from_json(&value["counterfactual"])
            .map_err(|e| bad(&format!("counterfactual: {e}")))?;
        let label = |key: &str| -> Result<usize, SearchError> {
            let text = match &value[key] {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Number(n) => n.to_string(),
                _ => return Err(bad(&format!("missing {key}"))),
            };
            schema
                .label_index(&text)
                .ok_or_else(|| bad(&format!("{key} {text:?} is not a target label")))
        };
        let y_fact = label("y_fact")?;
        let y_cf = label("y_cf")?;
        let distance = value["distance"].as_f64().ok_or_else(|| bad("missing distance"))?;
        if y_fact == y_cf {
            return Err(bad("outcomes must differ"));
        }
        let changed_features = changed_features(&factual, &counterfactual, schema);
        if changed_features.is_empty() {
            return Err(bad("factual and counterfactual are identical"));
        }
        Ok(Self {
            id,
            row,
            factual,
            counterfactual,
            y_fact,
            y_cf,
            changed_features,
            distance,
        })
    }
}

fn changed_features(a: &Instance, b: &Instance, schema: &FeatureSchema) -> Vec<String> {
    schema
        .features
        .iter()
        .zip(a.values.iter().zip(&b.values))
        .filter(|(_, (x, y))| x != y)
        .map(|(f, _)| f.name.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum SearchOutcome {
    Found(CounterfactualPair),
    /// Every candidate in the edit space was checked and none flips the prediction.
    NotFound,
}

#[derive(Debug, Clone)]
struct Candidate {
    value: FeatureValue,
    encoded: f64,
    /// Weighted per-feature distance from the factual value.
    cost: f64,
    /// Position in the declared list (categoricals) or ascending value rank (numerics).
    order: usize,
}

/// Per-feature candidate lists. Index 0 of each list is the factual value.
fn candidate_grid(
    oracle: &DecisionTree,
    x: &Instance,
    config: &DistanceConfig,
) -> Vec<Vec<Candidate>> {
    let schema = &oracle.schema;
    schema
        .features
        .iter()
        .enumerate()
        .map(|(j, spec)| {
            let current = &x.values[j];
            let mut values: Vec<FeatureValue> = Vec::new();
            if spec.mutable {
                match &spec.kind {
                    FeatureKind::Categorical { values: admissible } => {
                        values.extend(admissible.iter().cloned().map(FeatureValue::Categorical));
                    }
                    FeatureKind::Numeric { min, max, integer } => {
                        values.extend(
                            numeric_candidates(&oracle.thresholds(j), *min, *max, *integer)
                                .into_iter()
                                .map(FeatureValue::Numeric),
                        );
                    }
                }
            }
            let mut list = vec![Candidate {
                value: current.clone(),
                encoded: spec.encode(current),
                cost: 0.0,
                order: 0,
            }];
            let mut others: Vec<Candidate> = values
                .into_iter()
                .enumerate()
                .filter(|(_, v)| v != current)
                .map(|(order, value)| Candidate {
                    encoded: spec.encode(&value),
                    cost: config.weights[j] * config.feature_term(j, current, &value),
                    value,
                    order,
                })
                .collect();
            others.sort_by(|a, b| a.cost.total_cmp(&b.cost).then(a.order.cmp(&b.order)));
            list.extend(others);
            list
        })
        .collect()
}

/// Values that sit just on either side of every threshold, plus the bounds,
/// clipped to `[min, max]`, ascending and de-duplicated.
pub fn numeric_candidates(thresholds: &[f64], min: f64, max: f64, integer: bool) -> Vec<f64> {
    let (lo, hi) = if integer { (min.ceil(), max.floor()) } else { (min, max) };
    let step = (max - min) * 1e-6;
    let mut out = vec![lo, hi];
    for &t in thresholds {
        if integer {
            let below = t.floor();
            out.push(below);
            out.push(below + 1.0);
        } else {
            out.push(t);
            out.push(t + step);
        }
    }
    out.retain(|v| *v >= lo && *v <= hi);
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

#[derive(Debug, Clone)]
struct Node {
    distance: f64,
    changed: Vec<usize>,
    orders: Vec<usize>,
    indices: Vec<usize>,
    /// Last feature whose index was moved off the factual value.
    pivot: Option<usize>,
}

impl Node {
    fn key(&self) -> (f64, usize, &[usize], &[usize]) {
        (self.distance, self.changed.len(), &self.changed, &self.orders)
    }
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        let (d1, n1, c1, o1) = self.key();
        let (d2, n2, c2, o2) = other.key();
        d1.total_cmp(&d2)
            .then(n1.cmp(&n2))
            .then_with(|| c1.cmp(c2))
            .then_with(|| o1.cmp(o2))
    }
}

fn make_node(grid: &[Vec<Candidate>], indices: Vec<usize>, pivot: Option<usize>, total_weight: f64) -> Node {
    let mut sum = 0.0;
    let mut changed = Vec::new();
    let mut orders = Vec::new();
    for (j, &i) in indices.iter().enumerate() {
        // Summed in feature order so that raising one term never lowers the total.
        sum += grid[j][i].cost;
        if i > 0 {
            changed.push(j);
            orders.push(grid[j][i].order);
        }
    }
    Node {
        distance: sum / total_weight,
        changed,
        orders,
        indices,
        pivot,
    }
}

/// Searches for the closest instance the oracle classifies differently from `x`.
pub fn find_counterfactual(
    oracle: &DecisionTree,
    x: &Instance,
    config: &DistanceConfig,
    budget: SearchBudget,
) -> Result<SearchOutcome, SearchError> {
    let schema = &oracle.schema;
    schema
        .validate_instance(x)
        .map_err(|e| SearchError::InvalidInstance(e.to_string()))?;
    config.validate(schema.len())?;
    let k = schema.len();
    let max_changed = budget.max_changed_features.unwrap_or(k).max(1);
    let y_fact = oracle.predict(x);
    let grid = candidate_grid(oracle, x, config);
    let total_weight = config.total_weight();
    let mut encoded = encode(x, schema);

    let mut heap = BinaryHeap::new();
    heap.push(Reverse(make_node(&grid, vec![0; k], None, total_weight)));
    let mut best: Option<Node> = None;
    let mut expansions = 0usize;

    while let Some(Reverse(node)) = heap.pop() {
        if let Some(b) = &best {
            if node.distance > b.distance + SHELL_TOLERANCE {
                break;
            }
        }
        expansions += 1;
        if expansions > budget.max_expansions {
            if best.is_some() {
                break;
            }
            return Err(SearchError::BudgetExhausted {
                expansions: budget.max_expansions,
            });
        }
        if !node.changed.is_empty() {
            for (j, &i) in node.indices.iter().enumerate() {
                encoded[j] = grid[j][i].encoded;
            }
            if oracle.predict_encoded(&encoded) != y_fact {
                if best.as_ref().map_or(true, |b| node.cmp(b) == Ordering::Less) {
                    best = Some(node);
                }
                // Descendants add changes, so they can never beat this node.
                continue;
            }
        }
        if let Some(p) = node.pivot {
            if node.indices[p] + 1 < grid[p].len() {
                let mut indices = node.indices.clone();
                indices[p] += 1;
                heap.push(Reverse(make_node(&grid, indices, Some(p), total_weight)));
            }
        }
        if node.changed.len() < max_changed {
            let start = node.pivot.map_or(0, |p| p + 1);
            for j in start..k {
                if grid[j].len() > 1 {
                    let mut indices = node.indices.clone();
                    indices[j] = 1;
                    heap.push(Reverse(make_node(&grid, indices, Some(j), total_weight)));
                }
            }
        }
    }

    let Some(best) = best else {
        return Ok(SearchOutcome::NotFound);
    };
    let counterfactual = Instance::new(
        best.indices
            .iter()
            .enumerate()
            .map(|(j, &i)| grid[j][i].value.clone())
            .collect(),
    );
    let y_cf = oracle.predict(&counterfactual);
    let pair = CounterfactualPair::new("cf", x.clone(), counterfactual, y_fact, y_cf, schema, config)?;
    Ok(SearchOutcome::Found(pair))
}

/// Outcome of running the search over every row of a dataset.
#[derive(Debug, Clone, Default)]
pub struct GenerationReport {
    pub pairs: Vec<CounterfactualPair>,
    /// Rows for which no counterfactual exists in the edit space.
    pub not_found: Vec<usize>,
    /// Rows where the search budget ran out.
    pub exhausted: Vec<usize>,
}

pub fn pair_id(row: usize) -> String {
    format!("row-{row}")
}

/// Runs [`find_counterfactual`] on each row (in parallel), keeping row order.
pub fn generate_pairs(
    oracle: &DecisionTree,
    dataset: &LabeledDataset,
    config: &DistanceConfig,
    budget: SearchBudget,
) -> Result<GenerationReport, SearchError> {
    if dataset.schema.features != oracle.schema.features {
        return Err(SearchError::InvalidInstance("dataset schema differs from the oracle schema".into()));
    }
    let outcomes: Vec<Result<SearchOutcome, SearchError>> = dataset
        .rows
        .par_iter()
        .map(|x| find_counterfactual(oracle, x, config, budget))
        .collect();
    let mut report = GenerationReport::default();
    for (row, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(SearchOutcome::Found(mut pair)) => {
                pair.id = pair_id(row);
                pair.row = Some(row);
                report.pairs.push(pair);
            }
            Ok(SearchOutcome::NotFound) => report.not_found.push(row),
            Err(SearchError::BudgetExhausted { .. }) => report.exhausted.push(row),
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}
