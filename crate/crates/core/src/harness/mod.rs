//! End-to-end experiments over the other modules.

pub mod config;
pub mod experiment;
pub mod report;

pub use config::{load_config, parse_config, ExperimentConfig};
pub use experiment::{
    run_comparison, run_specialization_probe, run_switching_ablation, RunDir, SwitchingPair,
};
pub use report::{emit_report, ComparisonReport};
