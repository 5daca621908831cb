//! Parses raw model replies and scores them with AvgFF, PFF and TF.
//!
//!     cargo run --example score_narratives

use mnr::counterfactual::{CounterfactualPair, DistanceConfig};
use mnr::metrics::parse::parse_structured;
use mnr::metrics::{avg_ff, pff, tf, GroundTruth, MetricsReport, Scored};
use mnr::tabular::presets;

const REPLIES: [&str; 4] = [
    // Faithful, with a reasoning span and a fenced block.
    r#"<think>The counterfactual changes marital status.</think>Getting married flips the outcome.
```json
{"factual": {"age": 33, "workclass": "Private", "education": "School", "marital_status": "Divorced",
 "occupation": "Blue-Collar", "race": "White", "gender": "Male", "hours_per_week": 35},
 "counterfactual": {"age": 33, "workclass": "Private", "education": "School", "marital_status": "Married",
 "occupation": "White-Collar", "race": "Other", "gender": "Male", "hours_per_week": 35},
 "factual_outcome": 0, "counterfactual_outcome": 1, "narrative": "Marriage flips it."}
```"#,
    // Two wrong counterfactual values, loose casing and a numeric string.
    r#"{"factual": {"age": "33.0", "workclass": "private", "education": "School", "marital_status": "Divorced",
 "occupation": "Blue-Collar", "race": "White", "gender": "Male", "hours_per_week": 35},
 "counterfactual": {"age": 33, "workclass": "Private", "education": "School", "marital_status": "Divorced",
 "occupation": "White-Collar", "race": "White", "gender": "Male", "hours_per_week": 35},
 "factual_outcome": 0, "counterfactual_outcome": 1} Hope this helps!"#,
    // Outcomes swapped.
    r#"{"factual": {}, "counterfactual": {}, "factual_outcome": 1, "counterfactual_outcome": 0}"#,
    // Prose only.
    "Being married is associated with higher income.",
];

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let schema = presets::adult();
    let x = schema.parse_instance(&["33", "Private", "School", "Divorced", "Blue-Collar", "White", "Male", "35"])?;
    let xp = schema.parse_instance(&["33", "Private", "School", "Married", "White-Collar", "Other", "Male", "35"])?;
    let pair = CounterfactualPair::new("t4", x, xp, 0, 1, &schema, &DistanceConfig::from_schema(&schema))?;
    let truth = GroundTruth::from_pair(&pair);

    let parsed: Vec<_> = REPLIES.iter().map(|r| parse_structured(r, &schema)).collect();
    for (i, p) in parsed.iter().enumerate() {
        match p {
            Ok(e) => println!("reply {i}: parsed, outcomes {} -> {}", e.y_fact_claimed, e.y_cf_claimed),
            Err(err) => println!("reply {i}: {err}"),
        }
    }
    let scored: Vec<Scored<'_>> = parsed
        .iter()
        .map(|p| Scored {
            extraction: p.as_ref().ok(),
            truth: &truth,
        })
        .collect();
    println!("AvgFF {:.4}  PFF {:.4}  TF {:.4}", avg_ff(&scored)?, pff(&scored)?, tf(&scored)?);

    let ids: Vec<String> = (0..REPLIES.len()).map(|i| format!("reply-{i}")).collect();
    let report = MetricsReport::compute(&scored, &ids, &[])?;
    println!("{}", serde_json::to_string_pretty(&report.to_json())?);
    Ok(())
}
