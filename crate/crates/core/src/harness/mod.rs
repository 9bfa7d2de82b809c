//! Everything around the model: synthetic data, splits, expert stages,
//! hyperparameter search and the ablation variants.

pub mod config;
pub mod pipeline;
pub mod rng;
pub mod splits;
pub mod synth;
pub mod tune;
pub mod variants;

pub use config::{Config, HyperGrid};
pub use pipeline::{prepare, retrain_on_union, train_stage, Dataset, EvalData, GateData, GateSpec, Prepared, StageExperts};
pub use splits::{build_splits, SplitConfig, Splits};
pub use synth::{generate_synthetic, SyntheticData, SyntheticSpec};
pub use tune::{tune_combiner, tune_gate_config, CombinerTuning, GateTuning};
pub use variants::{ablate, run_variant, Variant, VariantResult};
