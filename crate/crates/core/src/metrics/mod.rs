//! Faithfulness metrics over a set of narratives.
//!
//! For `n` narratives over `k` features:
//!
//! - AvgFF: features whose factual AND counterfactual values both match,
//!   summed over narratives, divided by `n * k`.
//! - PFF: fraction of narratives matching all `k` features on both sides.
//! - TF: fraction of narratives stating both outcomes correctly.
//!
//! A narrative whose structured block failed to parse stays in the
//! denominator with zero credit; an absent feature never matches.

pub mod parse;

use std::collections::HashMap;

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::counterfactual::CounterfactualPair;
use crate::pipeline::NarrativeRecord;
use parse::ExtractedNarrative;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no narratives to score")]
    Empty,
    #[error("narrative {index} has {got} features; expected {expected}")]
    Arity { index: usize, expected: usize, got: usize },
    #[error("no ground truth for pair {0:?}")]
    UnmatchedPair(String),
}

/// Reference values for one narrative.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub f_fact: Vec<String>,
    pub f_cf: Vec<String>,
    pub y_fact: usize,
    pub y_cf: usize,
}

impl GroundTruth {
    pub fn from_pair(pair: &CounterfactualPair) -> Self {
        Self {
            f_fact: pair.factual.values.iter().map(ToString::to_string).collect(),
            f_cf: pair.counterfactual.values.iter().map(ToString::to_string).collect(),
            y_fact: pair.y_fact,
            y_cf: pair.y_cf,
        }
    }

    pub fn k(&self) -> usize {
        self.f_fact.len()
    }
}

/// One narrative to score: its extraction (`None` for a parse failure) and truth.
#[derive(Debug, Clone, Copy)]
pub struct Scored<'a> {
    pub extraction: Option<&'a ExtractedNarrative>,
    pub truth: &'a GroundTruth,
}

/// Value equality. When the truth is a finite number the claim must parse to
/// the same number (`35` equals `35.0`); otherwise comparison is
/// case-insensitive after trimming.
pub fn values_match(truth: &str, claimed: Option<&str>) -> bool {
    let Some(claimed) = claimed else {
        return false;
    };
    let (t, c) = (truth.trim(), claimed.trim());
    match t.parse::<f64>() {
        Ok(x) if x.is_finite() => c.parse::<f64>().is_ok_and(|y| y == x),
        _ => t.to_lowercase() == c.to_lowercase(),
    }
}

/// Features of one narrative matching on both sides.
pub fn feature_matches(s: &Scored<'_>) -> usize {
    let Some(e) = s.extraction else {
        return 0;
    };
    (0..s.truth.k())
        .filter(|&i| {
            values_match(&s.truth.f_fact[i], e.f_fact[i].as_deref())
                && values_match(&s.truth.f_cf[i], e.f_cf[i].as_deref())
        })
        .count()
}

pub fn target_correct(s: &Scored<'_>) -> bool {
    s.extraction
        .is_some_and(|e| e.y_fact_claimed == s.truth.y_fact && e.y_cf_claimed == s.truth.y_cf)
}

fn check(records: &[Scored<'_>]) -> Result<usize, MetricsError> {
    let first = records.first().ok_or(MetricsError::Empty)?;
    let k = first.truth.k();
    for (index, r) in records.iter().enumerate() {
        let lens = [
            r.truth.f_fact.len(),
            r.truth.f_cf.len(),
            r.extraction.map_or(k, |e| e.f_fact.len()),
            r.extraction.map_or(k, |e| e.f_cf.len()),
        ];
        if let Some(&got) = lens.iter().find(|&&l| l != k) {
            return Err(MetricsError::Arity { index, expected: k, got });
        }
    }
    Ok(k)
}

pub fn avg_ff(records: &[Scored<'_>]) -> Result<f64, MetricsError> {
    let k = check(records)?;
    let total: usize = records.iter().map(feature_matches).sum();
    Ok(total as f64 / (records.len() * k) as f64)
}

pub fn pff(records: &[Scored<'_>]) -> Result<f64, MetricsError> {
    let k = check(records)?;
    let perfect = records.iter().filter(|r| r.extraction.is_some() && feature_matches(r) == k).count();
    Ok(perfect as f64 / records.len() as f64)
}

pub fn tf(records: &[Scored<'_>]) -> Result<f64, MetricsError> {
    check(records)?;
    let correct = records.iter().filter(|r| target_correct(r)).count();
    Ok(correct as f64 / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NarrativeDetail {
    pub pair_id: String,
    pub feature_matches: usize,
    pub perfect: bool,
    pub target_correct: bool,
    pub parse_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub avg_ff: f64,
    /// Population standard deviation of per-narrative match fractions.
    pub avg_ff_std: f64,
    pub pff: f64,
    pub tf: f64,
    pub n_narratives: usize,
    pub n_parse_failures: usize,
    pub k: usize,
    pub detail: Vec<NarrativeDetail>,
}

impl MetricsReport {
    /// Scores `records`; `ids` and `parse_errors` label the detail rows.
    pub fn compute(
        records: &[Scored<'_>],
        ids: &[String],
        parse_errors: &[Option<String>],
    ) -> Result<Self, MetricsError> {
        let k = check(records)?;
        let detail: Vec<NarrativeDetail> = records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let m = feature_matches(r);
                NarrativeDetail {
                    pair_id: ids.get(i).cloned().unwrap_or_else(|| i.to_string()),
                    feature_matches: m,
                    perfect: r.extraction.is_some() && m == k,
                    target_correct: target_correct(r),
                    parse_error: parse_errors.get(i).cloned().flatten(),
                }
            })
            .collect();
        let n = records.len() as f64;
        let fractions: Vec<f64> = detail.iter().map(|d| d.feature_matches as f64 / k as f64).collect();
        let mean = fractions.iter().sum::<f64>() / n;
        let var = fractions.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / n;
        Ok(Self {
            avg_ff: avg_ff(records)?,
            avg_ff_std: var.sqrt(),
            pff: pff(records)?,
            tf: tf(records)?,
            n_narratives: records.len(),
            n_parse_failures: records.iter().filter(|r| r.extraction.is_none()).count(),
            k,
            detail,
        })
    }

    pub fn summary_json(&self) -> serde_json::Value {
        json!({
            "avg_ff": self.avg_ff,
            "avg_ff_std": self.avg_ff_std,
            "pff": self.pff,
            "tf": self.tf,
            "n_narratives": self.n_narratives,
            "n_parse_failures": self.n_parse_failures,
            "k": self.k,
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "summary": self.summary_json(),
            "detail": self.detail,
        })
    }

    /// Header plus one summary row.
    pub fn summary_csv(&self) -> String {
        format!(
            "avg_ff,avg_ff_std,pff,tf,n_narratives,n_parse_failures,k\n{},{},{},{},{},{},{}\n",
            self.avg_ff, self.avg_ff_std, self.pff, self.tf, self.n_narratives, self.n_parse_failures, self.k
        )
    }
}

/// Scores narrative records against ground truths looked up by pair id.
pub fn score_batch(records: &[NarrativeRecord], truths: &HashMap<String, GroundTruth>) -> Result<MetricsReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut scored = Vec::with_capacity(records.len());
    for r in records {
        let truth = truths
            .get(r.pair_id())
            .ok_or_else(|| MetricsError::UnmatchedPair(r.pair_id().to_string()))?;
        scored.push(Scored {
            extraction: r.extraction.as_ref().ok(),
            truth,
        });
    }
    let ids: Vec<String> = records.iter().map(|r| r.pair_id().to_string()).collect();
    let errors: Vec<Option<String>> = records
        .iter()
        .map(|r| r.extraction.as_ref().err().map(ToString::to_string))
        .collect();
    MetricsReport::compute(&scored, &ids, &errors)
}

/// Truths taken from the pairs the records were generated for.
pub fn truths_from_records(records: &[NarrativeRecord]) -> HashMap<String, GroundTruth> {
    records
        .iter()
        .map(|r| (r.pair.id.clone(), GroundTruth::from_pair(&r.pair)))
        .collect()
}
