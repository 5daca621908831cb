//! Minimal counterfactuals for a few held-out Adult rows.
//!
//!     cargo run --release --example counterfactuals

use std::path::PathBuf;
use std::sync::Arc;

use mnr::counterfactual::{find_counterfactual, generate_pairs, DistanceConfig, SearchBudget, SearchOutcome};
use mnr::oracle::{DecisionTree, TreeParams};
use mnr::tabular::{load_csv, presets};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let csv = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/adult.csv");
    let schema = Arc::new(presets::adult());
    let (train, test) = load_csv(csv, schema.clone())?.split(0.2, 42);
    let oracle = DecisionTree::train(&train, TreeParams::default())?;
    let config = DistanceConfig::from_dataset(&train);

    let rows = test.subset(&(0..8).collect::<Vec<_>>());
    let report = generate_pairs(&oracle, &rows, &config, SearchBudget::default())?;
    for pair in &report.pairs {
        let changes: Vec<String> = pair
            .changed_features
            .iter()
            .map(|name| {
                let j = schema.feature_index(name).unwrap();
                format!("{name}: {} -> {}", pair.factual.values[j], pair.counterfactual.values[j])
            })
            .collect();
        println!(
            "{} ({} -> {}), distance {:.4}: {}",
            pair.id,
            schema.target_labels[pair.y_fact],
            schema.target_labels[pair.y_cf],
            pair.distance,
            changes.join(", ")
        );
    }
    println!("not found: {:?}, budget exhausted: {:?}", report.not_found, report.exhausted);

    // Freeze age and gender, and allow at most one edit.
    let mut frozen = (*schema).clone();
    for name in ["age", "gender"] {
        let j = frozen.feature_index(name).unwrap();
        frozen.features[j].mutable = false;
    }
    let oracle = DecisionTree::from_root(oracle.root.clone(), Arc::new(frozen), oracle.params);
    let budget = SearchBudget {
        max_changed_features: Some(1),
        ..SearchBudget::default()
    };
    match find_counterfactual(&oracle, &test.rows[0], &config, budget)? {
        SearchOutcome::Found(p) => println!("single edit for row 0: {:?} at distance {:.4}", p.changed_features, p.distance),
        SearchOutcome::NotFound => println!("no single mutable edit flips row 0"),
    }
    Ok(())
}
