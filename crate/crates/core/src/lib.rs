//! Evaluation harness for self-generated counterfactual explanations.

pub mod analysis;
pub mod client;
pub mod dataset;
pub mod extraction;
pub mod metrics;
pub mod mock;
pub mod pipeline;
pub mod prompts;
pub mod report;
pub mod stats;
pub mod store;
pub mod task;
