//! Trains the depth-4 oracle on the bundled Adult and Titanic tables and
//! prints held-out accuracy.
//!
//!     cargo run --release --example train_oracle

use std::path::PathBuf;
use std::sync::Arc;

use mnr::oracle::{DecisionTree, TreeParams};
use mnr::tabular::{load_csv, presets};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data");
    for (name, schema) in [("adult", presets::adult()), ("titanic", presets::titanic())] {
        let dataset = load_csv(data.join(format!("{name}.csv")), Arc::new(schema))?;
        let (train, test) = dataset.split(0.2, 42);
        let tree = DecisionTree::train(&train, TreeParams::default())?;
        println!(
            "{name}: {} train / {} test rows, depth {}, test accuracy {:.4}",
            train.len(),
            test.len(),
            tree.depth(),
            tree.accuracy(&test)?
        );
    }
    Ok(())
}
