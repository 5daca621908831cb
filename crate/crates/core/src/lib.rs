//! Counterfactual narratives for tabular classifiers: a decision-tree oracle,
//! minimal-distance counterfactual search, prompt rendering, a two-stage
//! draft/refine generation pipeline over chat-completion backends, distillation
//! dataset builders, structured-output scoring and energy profiling.

pub mod counterfactual;
pub mod oracle;
pub mod tabular;
pub mod gateway;
pub mod prompt;
pub mod metrics;
pub mod pipeline;
pub mod kd;
pub mod energy;
pub mod cli;
