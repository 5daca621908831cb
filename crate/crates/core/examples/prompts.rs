//! Renders the draft and refiner prompts for one Adult pair.
//!
//!     cargo run --example prompts

use mnr::counterfactual::{CounterfactualPair, DistanceConfig};
use mnr::prompt::{render_draft, render_refiner, PromptTemplate};
use mnr::tabular::presets;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let schema = presets::adult();
    let x = schema.parse_instance(&["33", "Private", "School", "Divorced", "Blue-Collar", "White", "Male", "35"])?;
    let xp = schema.parse_instance(&["33", "Private", "School", "Married", "White-Collar", "Other", "Male", "35"])?;
    let pair = CounterfactualPair::new("example", x, xp, 0, 1, &schema, &DistanceConfig::from_schema(&schema))?;

    let draft = render_draft(&PromptTemplate::default_draft(), &pair, &schema)?;
    println!("=== draft system ===\n{}\n", draft.system);
    println!("=== draft user ===\n{}\n", draft.text);

    let drafts = [
        "Marrying and moving to a white-collar job lift the predicted income above 50K.",
        "<think>compare rows</think>The change in marital status drives the flip.",
        "Occupation and race differ; the model now predicts >50K.",
    ];
    let refiner = render_refiner(&PromptTemplate::default_refiner(drafts.len()), &pair, &schema, &drafts)?;
    println!("=== refiner user ===\n{}", refiner.text);

    // Custom bodies must place each instance block and the outcome block exactly once.
    let short = PromptTemplate {
        body: "Explain in one sentence.\n\n{factual_block}\n\n{counterfactual_block}\n\n{outcome_block}\n\n{output_contract}".into(),
        ..PromptTemplate::default_draft()
    };
    println!("\n=== custom draft ===\n{}", render_draft(&short, &pair, &schema)?.text);
    let broken = PromptTemplate {
        body: "Explain {factual_block}.".into(),
        ..PromptTemplate::default_draft()
    };
    if let Err(e) = broken.validate() {
        println!("\nrejected template: {e}");
    }
    Ok(())
}
