//! Extraction of the structured block from a model reply.
//!
//! The reply is cleaned of reasoning spans and code fences, then scanned for
//! top-level balanced `{...}` spans, skipping braces inside quoted strings.
//! The last span that parses as a JSON object is the block. Strict JSON is
//! tried first, then JSON5 for trailing commas, single quotes and comments.

use serde_json::{Map, Value};
use thiserror::Error;

use crate::gateway::strip_reasoning;
use crate::tabular::{format_number, FeatureSchema};

pub const REQUIRED_KEYS: [&str; 4] = ["factual", "counterfactual", "factual_outcome", "counterfactual_outcome"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no balanced JSON object found")]
    NoObject,
    #[error("found {candidates} brace-balanced spans but none is valid JSON")]
    InvalidJson { candidates: usize },
    #[error("structured block lacks required keys {0:?}")]
    MissingKeys(Vec<String>),
    #[error("key {0:?} must map to an object")]
    NotAnObject(String),
    #[error("key {key:?} has unrecognised outcome value {value}")]
    BadOutcome { key: String, value: String },
}

/// Values claimed by a narrative, aligned to schema order. `None` marks a feature
/// the block did not mention.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedNarrative {
    pub f_fact: Vec<Option<String>>,
    pub f_cf: Vec<Option<String>>,
    pub y_fact_claimed: usize,
    pub y_cf_claimed: usize,
    pub narrative_text: String,
}

impl ExtractedNarrative {
    /// Structured block carrying the extracted values, keyed by feature name.
    pub fn to_json(&self, schema: &FeatureSchema) -> Value {
        let side = |values: &[Option<String>]| -> Value {
            let mut m = Map::new();
            for (f, v) in schema.features.iter().zip(values) {
                if let Some(v) = v {
                    let value = if f.is_categorical() {
                        Value::String(v.clone())
                    } else {
                        v.parse::<f64>()
                            .ok()
                            .filter(|x| x.is_finite())
                            .map(crate::tabular::number_to_json)
                            .unwrap_or_else(|| Value::String(v.clone()))
                    };
                    m.insert(f.name.clone(), value);
                }
            }
            Value::Object(m)
        };
        serde_json::json!({
            "factual": side(&self.f_fact),
            "counterfactual": side(&self.f_cf),
            "factual_outcome": self.y_fact_claimed,
            "counterfactual_outcome": self.y_cf_claimed,
            "narrative": self.narrative_text,
        })
    }
}

/// Lowercase, with runs of spaces, `_` and `-` folded into a single `_`.
fn normalize_key(key: &str) -> String {
    let mut out = String::with_capacity(key.len());
    let mut gap = false;
    for c in key.trim().chars() {
        if c == ' ' || c == '_' || c == '-' {
            gap = true;
        } else {
            if gap && !out.is_empty() {
                out.push('_');
            }
            gap = false;
            out.extend(c.to_lowercase());
        }
    }
    out
}

/// Removes ``` fence markers and any language tag that follows them.
pub fn remove_fences(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(i) = rest.find("```") {
        out.push_str(&rest[..i]);
        rest = &rest[i..];
        rest = rest.trim_start_matches('`');
        let tag_len = rest
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '-'))
            .unwrap_or(rest.len());
        // A language tag is a word directly followed by whitespace.
        if rest[tag_len..].starts_with(char::is_whitespace) {
            rest = &rest[tag_len..];
        }
    }
    out.push_str(rest);
    out
}

/// Byte ranges of top-level brace-balanced spans, in order. An opener that
/// never closes is skipped so that later spans are still found.
pub fn balanced_spans(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'{' {
            i += 1;
            continue;
        }
        match span_end(bytes, i) {
            Some(end) => {
                spans.push((i, end));
                i = end;
            }
            None => i += 1,
        }
    }
    spans
}

/// Exclusive end of the object opened at `start`, honouring string literals.
fn span_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut quote: Option<u8> = None;
    let mut escaped = false;
    for (offset, &b) in bytes[start..].iter().enumerate() {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == q {
                quote = None;
            }
            continue;
        }
        match b {
            b'"' | b'\'' => quote = Some(b),
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + offset + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn parse_object(candidate: &str) -> Option<Map<String, Value>> {
    let value = serde_json::from_str::<Value>(candidate)
        .ok()
        .or_else(|| json5::from_str::<Value>(candidate).ok())?;
    match value {
        Value::Object(m) => Some(m),
        _ => None,
    }
}

/// The last parseable top-level object and the text preceding it.
fn last_object(clean: &str) -> Result<(Map<String, Value>, &str), ParseError> {
    let spans = balanced_spans(clean);
    if spans.is_empty() {
        return Err(ParseError::NoObject);
    }
    spans
        .iter()
        .rev()
        .find_map(|&(s, e)| parse_object(&clean[s..e]).map(|m| (m, &clean[..s])))
        .ok_or(ParseError::InvalidJson {
            candidates: spans.len(),
        })
}

fn value_text(v: &Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::String(s) => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.as_f64().map(format_number).unwrap_or_else(|| n.to_string())),
        other => Some(other.to_string()),
    }
}

fn coerce_outcome(key: &str, v: &Value, schema: &FeatureSchema) -> Result<usize, ParseError> {
    let bad = || ParseError::BadOutcome {
        key: key.to_string(),
        value: v.to_string(),
    };
    let text = match v {
        Value::Number(n) => match n.as_f64() {
            Some(x) if x == 0.0 => return Ok(0),
            Some(x) if x == 1.0 => return Ok(1),
            _ => return Err(bad()),
        },
        Value::String(s) => s.trim(),
        _ => return Err(bad()),
    };
    if text == "0" || text == "1" {
        return Ok(usize::from(text == "1"));
    }
    let matches = |candidates: &[String]| candidates.iter().position(|c| c.trim().eq_ignore_ascii_case(text));
    matches(&schema.target_labels)
        .or_else(|| schema.outcome_descriptions.as_ref().and_then(|d| matches(d)))
        .ok_or_else(bad)
}

fn side_values(map: &Map<String, Value>, schema: &FeatureSchema) -> Vec<Option<String>> {
    let mut out = vec![None; schema.len()];
    for (key, value) in map {
        let key = normalize_key(key);
        let hit = schema
            .features
            .iter()
            .position(|f| normalize_key(&f.name) == key || f.label.as_deref().is_some_and(|l| normalize_key(l) == key));
        if let Some(j) = hit {
            out[j] = value_text(value);
        }
    }
    out
}

/// Parses the structured block at the end of a model reply.
pub fn parse_structured(text: &str, schema: &FeatureSchema) -> Result<ExtractedNarrative, ParseError> {
    let clean = remove_fences(&strip_reasoning(text));
    let (object, prose) = last_object(&clean)?;
    let fields: Vec<(String, &Value)> = object.iter().map(|(k, v)| (normalize_key(k), v)).collect();
    let get = |name: &str| fields.iter().find(|(k, _)| k == name).map(|(_, v)| *v);
    let missing: Vec<String> = REQUIRED_KEYS
        .iter()
        .filter(|k| get(k).is_none())
        .map(|k| k.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(ParseError::MissingKeys(missing));
    }
    let side = |key: &str| match get(key) {
        Some(Value::Object(m)) => Ok(side_values(m, schema)),
        _ => Err(ParseError::NotAnObject(key.to_string())),
    };
    let f_fact = side("factual")?;
    let f_cf = side("counterfactual")?;
    let y_fact_claimed = coerce_outcome("factual_outcome", get("factual_outcome").unwrap_or(&Value::Null), schema)?;
    let y_cf_claimed = coerce_outcome(
        "counterfactual_outcome",
        get("counterfactual_outcome").unwrap_or(&Value::Null),
        schema,
    )?;
    let narrative_text = match get("narrative") {
        Some(Value::String(s)) => s.trim().to_string(),
        _ => prose.trim().to_string(),
    };
    Ok(ExtractedNarrative {
        f_fact,
        f_cf,
        y_fact_claimed,
        y_cf_claimed,
        narrative_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::presets;

    const BLOCK: &str = r#"{"factual": {"age": 33, "workclass": "Private", "education": "School",
        "marital status": "Divorced", "occupation": "Blue-Collar", "race": "White", "gender": "Male",
        "hours per week": 35}, "counterfactual": {"age": 33, "workclass": "Private",
        "education": "School", "marital_status": "Married", "occupation": "White-Collar",
        "race": "Other", "gender": "Male", "hours_per_week": 35},
        "factual_outcome": 0, "counterfactual_outcome": ">50K", "narrative": "Marriage helps."}"#;

    #[test]
    fn table_block() {
        let schema = presets::adult();
        let text = format!("<think>draft {{\"x\": 1}}</think>Some prose.\n```json\n{BLOCK}\n```\n");
        let e = parse_structured(&text, &schema).unwrap();
        assert_eq!(e.f_cf[3].as_deref(), Some("Married"));
        assert_eq!(e.f_fact[7].as_deref(), Some("35"));
        assert_eq!((e.y_fact_claimed, e.y_cf_claimed), (0, 1));
        assert_eq!(e.narrative_text, "Marriage helps.");
    }

    #[test]
    fn prose_has_no_object() {
        assert_eq!(parse_structured("just words", &presets::adult()), Err(ParseError::NoObject));
    }

    #[test]
    fn last_object_wins() {
        let schema = presets::adult();
        let first = BLOCK.replace("Married", "Widowed");
        let text = format!("{first}\nthen revised:\n{BLOCK}");
        assert_eq!(parse_structured(&text, &schema).unwrap().f_cf[3].as_deref(), Some("Married"));
    }

    #[test]
    fn missing_keys_are_listed() {
        let err = parse_structured(r#"{"factual": {}, "narrative": "x"}"#, &presets::adult()).unwrap_err();
        assert_eq!(
            err,
            ParseError::MissingKeys(vec!["counterfactual".into(), "factual_outcome".into(), "counterfactual_outcome".into()])
        );
    }

    #[test]
    fn bad_outcome() {
        let text = BLOCK.replace("\"factual_outcome\": 0", "\"factual_outcome\": \"maybe\"");
        assert!(matches!(
            parse_structured(&text, &presets::adult()),
            Err(ParseError::BadOutcome { .. })
        ));
    }

    #[test]
    fn braces_inside_strings_are_ignored() {
        let spans = balanced_spans(r#"a {"k": "}{"} b {"z": 1"#);
        assert_eq!(spans, vec![(2, 13)]);
    }

    #[test]
    fn json5_fallback() {
        let text = "{factual: {age: 33,}, counterfactual: {'age': 40}, factual_outcome: 0, counterfactual_outcome: 1,}";
        let e = parse_structured(text, &presets::adult()).unwrap();
        assert_eq!(e.f_cf[0].as_deref(), Some("40"));
        assert_eq!(e.f_fact[1], None);
    }

    #[test]
    fn key_normalisation() {
        assert_eq!(normalize_key(" Hours  per-Week "), "hours_per_week");
        assert_eq!(normalize_key("Factual Outcome"), "factual_outcome");
    }

    #[test]
    fn fences_are_removed() {
        assert_eq!(remove_fences("a```json\n{}\n```b"), "a\n{}\nb");
    }

    #[test]
    fn reserialized_block_parses_to_the_same_values() {
        let schema = presets::adult();
        let e = parse_structured(BLOCK, &schema).unwrap();
        let again = parse_structured(&e.to_json(&schema).to_string(), &schema).unwrap();
        assert_eq!(again, e);
    }
}
