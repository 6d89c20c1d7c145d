//! Experiment plumbing: configuration, synthetic corpora and the commands.

pub mod config;
pub mod pipeline;
pub mod synth;

pub use config::{ExperimentConfig, FeatureSpec, Layering, StoredFeature};
pub use pipeline::{cmd_evaluate, cmd_extract, cmd_predict, cmd_train, ExtractSummary, FoldOutcome};
pub use synth::{synthesize, SynthSpec};
