//! Five-pair smoke run against a chat-completions endpoint.
//!
//!     MNR_LIVE_BASE_URL=http://localhost:8000/v1 \
//!     MNR_LIVE_MODEL=Qwen/Qwen2.5-0.5B-Instruct \
//!     cargo run --release --example live_endpoint_smoke
//!
//! `MNR_LIVE_REFINER_MODEL` picks a different refiner model on the same
//! server. If the server needs a key, put it in an environment variable and
//! name that variable in `MNR_LIVE_KEY_ENV`.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use mnr::counterfactual::{generate_pairs, DistanceConfig, SearchBudget};
use mnr::energy::{profile_pipeline, SyntheticSource};
use mnr::gateway::{Gateway, ModelEndpoint};
use mnr::metrics::{score_batch, GroundTruth};
use mnr::oracle::{DecisionTree, TreeParams};
use mnr::pipeline::PipelineConfig;
use mnr::tabular::{load_csv, presets};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (Ok(url), Ok(model)) = (std::env::var("MNR_LIVE_BASE_URL"), std::env::var("MNR_LIVE_MODEL")) else {
        eprintln!("set MNR_LIVE_BASE_URL and MNR_LIVE_MODEL to run this example");
        std::process::exit(2);
    };
    let refiner_model = std::env::var("MNR_LIVE_REFINER_MODEL").unwrap_or_else(|_| model.clone());
    let endpoint = |name: &str| {
        let mut e = ModelEndpoint::new(&url, name);
        e.auth_env = std::env::var("MNR_LIVE_KEY_ENV").ok();
        e.timeout_secs = 300.0;
        e
    };

    let schema = Arc::new(presets::adult());
    let csv = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/adult.csv");
    let (train, test) = load_csv(csv, schema.clone())?.split(0.2, 42);
    let oracle = DecisionTree::train(&train, TreeParams::default())?;
    let rows = test.subset(&(0..5).collect::<Vec<_>>());
    let pairs = generate_pairs(&oracle, &rows, &DistanceConfig::from_dataset(&train), SearchBudget::default())?.pairs;

    let config = PipelineConfig::new(
        Arc::new(Gateway::http(endpoint(&model), 3)?),
        Arc::new(Gateway::http(endpoint(&refiner_model), 1)?),
    );
    // Wall-clock only: the synthetic source reports a constant 1 W.
    let report = profile_pipeline(&config, &pairs, &schema, &SyntheticSource::constant(1.0), Duration::from_millis(200))?;
    for f in &report.batch.failures {
        println!("{} failed at {:?}: {}", f.pair_id, f.stage, f.error);
    }
    let truths: HashMap<String, GroundTruth> = pairs.iter().map(|p| (p.id.clone(), GroundTruth::from_pair(p))).collect();
    if report.batch.records.is_empty() {
        return Err("every pair failed".into());
    }
    let metrics = score_batch(&report.batch.records, &truths)?;
    println!("{}", serde_json::to_string_pretty(&metrics.summary_json())?);
    println!("time per explanation (s): {}", report.to_json()["time_seconds"]);
    Ok(())
}
