//! Draft-then-refine over scripted backends, no network needed.
//!
//! The drafter answers with short fixed narratives; the refiner restates the
//! pair it is shown ("mirror"), except for one pair where it is scripted to
//! fail with HTTP 400 so the failure report has something in it.
//!
//!     cargo run --example scripted_pipeline

use std::collections::HashMap;
use std::sync::Arc;

use mnr::counterfactual::{CounterfactualPair, DistanceConfig};
use mnr::gateway::{mirror_responder, ChatRequest, Fixture, Gateway, RetryPolicy, ScriptedBackend};
use mnr::metrics::{score_batch, GroundTruth};
use mnr::pipeline::{run_batch, PipelineConfig};
use mnr::tabular::presets;

fn pairs() -> Result<Vec<CounterfactualPair>, Box<dyn std::error::Error>> {
    let schema = presets::adult();
    let config = DistanceConfig::from_schema(&schema);
    let mut out = Vec::new();
    for (i, hours) in ["35", "40", "20", "50"].into_iter().enumerate() {
        let x = schema.parse_instance(&["33", "Private", "School", "Divorced", "Blue-Collar", "White", "Male", hours])?;
        let xp = schema.parse_instance(&["33", "Private", "School", "Married", "White-Collar", "Other", "Male", hours])?;
        out.push(CounterfactualPair::new(format!("p{i}"), x, xp, 0, 1, &schema, &config)?);
    }
    Ok(out)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let schema = Arc::new(presets::adult());
    let pairs = pairs()?;

    let drafter = ScriptedBackend::new("drafter").with_responder(Arc::new(|r: &ChatRequest| {
        format!("<think>draft {}</think>Marriage and a white-collar job raise the predicted income.", r.id.ordinal)
    }));
    let refiner = ScriptedBackend::new("refiner")
        .with_responder(mirror_responder(schema.clone()))
        .with_fixture("p2/refiner", 0, Fixture::text("unused").failing(vec![400]));
    let gw = |b: ScriptedBackend, cap| Arc::new(Gateway::new(Arc::new(b), RetryPolicy::no_backoff(0), cap));
    let config = PipelineConfig::new(gw(drafter, 3), gw(refiner, 2));

    let report = run_batch(&config, &pairs, &schema)?;
    for r in &report.records {
        println!("{}: {} drafts, refined reply {} bytes", r.pair_id(), r.drafts.len(), r.refined_raw.len());
    }
    println!("failures: {}", serde_json::to_string_pretty(&report.failures_json())?);

    let truths: HashMap<String, GroundTruth> = pairs.iter().map(|p| (p.id.clone(), GroundTruth::from_pair(p))).collect();
    let metrics = score_batch(&report.records, &truths)?;
    println!("metrics: {}", metrics.summary_json());
    print!("{}", metrics.summary_csv());

    let first = report.records[0].to_json(&schema);
    println!("first record refined_clean:\n{}", first["refined_clean"].as_str().unwrap_or_default());
    Ok(())
}
