//! Builds draft- and refiner-stage distillation datasets from a scripted
//! teacher, writes them as JSONL and reads them back.
//!
//!     cargo run --example kd_datasets

use std::sync::Arc;

use mnr::counterfactual::{CounterfactualPair, DistanceConfig};
use mnr::gateway::{ChatRequest, Fixture, Gateway, RetryPolicy, ScriptedBackend};
use mnr::kd::{build_draft_dataset, build_refiner_dataset, manifest_path, raw_path, read_jsonl, write_jsonl, KdOptions};
use mnr::prompt::PromptTemplate;
use mnr::tabular::presets;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let schema = presets::adult();
    let config = DistanceConfig::from_schema(&schema);
    let pairs: Vec<CounterfactualPair> = (0..4)
        .map(|i| {
            let age = (40 + i).to_string();
            let x = schema.parse_instance(&[&age, "Private", "HS-grad", "Married", "Sales", "White", "Female", "40"])?;
            let xp = schema.parse_instance(&[&age, "Private", "Masters", "Married", "Sales", "White", "Female", "40"])?;
            Ok(CounterfactualPair::new(format!("kd{i}"), x, xp, 0, 1, &schema, &config)?)
        })
        .collect::<Result<_, Box<dyn std::error::Error>>>()?;

    let teacher = ScriptedBackend::new("teacher")
        .with_responder(Arc::new(|r: &ChatRequest| {
            format!("<think>reasoning for {}</think>A master's degree moves the prediction above 50K.", r.id.session)
        }))
        .with_fixture("kd3/teacher", 0, Fixture::text("unused").failing(vec![503]));
    let drafter = ScriptedBackend::new("weak-drafter")
        .with_responder(Arc::new(|r: &ChatRequest| format!("Draft {}: education changed.", r.id.ordinal + 1)));
    let gw = |b: ScriptedBackend| Gateway::new(Arc::new(b), RetryPolicy::no_backoff(0), 2);
    let (teacher, drafter) = (gw(teacher), gw(drafter));

    let options = KdOptions {
        in_flight_cap: 2,
        drafter_selection: Some("weakest".into()),
        ..KdOptions::default()
    };
    let dir = std::env::temp_dir().join("mnr_kd_example");
    std::fs::create_dir_all(&dir)?;

    let draft = build_draft_dataset(&teacher, &pairs, &PromptTemplate::default_draft(), &schema, &options)?;
    let refiner = build_refiner_dataset(
        &teacher,
        &drafter,
        &pairs,
        &PromptTemplate::default_draft(),
        &PromptTemplate::default_refiner(3),
        &schema,
        3,
        &options,
    )?;
    for ds in [&draft, &refiner] {
        let path = dir.join(format!("kd_{}.jsonl", ds.stage));
        write_jsonl(ds, &path)?;
        let back = read_jsonl(&path)?;
        println!(
            "{}: {} examples, {} skipped, round-trip identical: {}",
            path.display(),
            back.examples.len(),
            back.manifest.skipped.len(),
            back == *ds
        );
        println!("  sidecars: {} and {}", manifest_path(&path).display(), raw_path(&path).display());
        for s in &back.manifest.skipped {
            println!("  skipped {} at {}: {}", s.pair_id, s.step, s.error);
        }
    }
    let ex = &refiner.examples[0];
    println!("\nrefiner prompt for {}:\n{}\n\nresponse: {}", ex.pair_id, ex.prompt, ex.response);
    Ok(())
}
