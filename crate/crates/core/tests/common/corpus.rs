use std::path::PathBuf;

use mnr::metrics::parse::{parse_structured, ParseError};
use mnr::tabular::presets;
use serde_json::Value;

pub fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/parser")
}

fn error_kind(e: &ParseError) -> &'static str {
    match e {
        ParseError::NoObject => "no_object",
        ParseError::InvalidJson { .. } => "invalid_json",
        ParseError::MissingKeys(_) => "missing_keys",
        ParseError::NotAnObject(_) => "not_an_object",
        ParseError::BadOutcome { .. } => "bad_outcome",
    }
}

/// Runs every annotated fixture; returns (passed, total, failure messages).
pub fn run_corpus() -> (usize, usize, Vec<String>) {
    let schema = presets::adult();
    let expected: Vec<Value> =
        serde_json::from_str(&std::fs::read_to_string(corpus_dir().join("expected.json")).unwrap()).unwrap();
    let mut failures = Vec::new();
    for case in &expected {
        let file = case["file"].as_str().unwrap();
        let text = std::fs::read_to_string(corpus_dir().join(file)).unwrap();
        let result = parse_structured(&text, &schema);
        let problem = match (case["expect"].as_str().unwrap(), &result) {
            ("error", Err(e)) if error_kind(e) == case["error"] => None,
            ("error", other) => Some(format!("expected {} got {other:?}", case["error"])),
            ("ok", Ok(e)) => {
                let mut issues = Vec::new();
                for (side, values) in [("factual", &e.f_fact), ("counterfactual", &e.f_cf)] {
                    for (name, want) in case[side].as_object().unwrap() {
                        let j = schema.feature_index(name).unwrap();
                        if values[j].as_deref() != want.as_str() {
                            issues.push(format!("{side}.{name}: {:?} != {want}", values[j]));
                        }
                    }
                }
                for name in case["absent_factual"].as_array().into_iter().flatten() {
                    if e.f_fact[schema.feature_index(name.as_str().unwrap()).unwrap()].is_some() {
                        issues.push(format!("factual.{name} should be absent"));
                    }
                }
                if (e.y_fact_claimed as u64, e.y_cf_claimed as u64) != (case["y_fact"].as_u64().unwrap(), case["y_cf"].as_u64().unwrap()) {
                    issues.push("outcomes differ".into());
                }
                if let Some(n) = case["narrative"].as_str() {
                    if e.narrative_text != n {
                        issues.push(format!("narrative {:?}", e.narrative_text));
                    }
                }
                // Reserializing the extracted block and parsing it again is value-identical.
                let again = parse_structured(&e.to_json(&schema).to_string(), &schema);
                if again.as_ref() != Ok(e) {
                    issues.push(format!("reserialized block parses to {again:?}"));
                }
                (!issues.is_empty()).then(|| issues.join("; "))
            }
            ("ok", Err(err)) => Some(format!("expected ok, got {err:?}")),
            (other, _) => Some(format!("unknown expectation {other}")),
        };
        if let Some(p) = problem {
            failures.push(format!("{file} ({}): {p}", case["style"].as_str().unwrap()));
        }
    }
    (expected.len() - failures.len(), expected.len(), failures)
}

