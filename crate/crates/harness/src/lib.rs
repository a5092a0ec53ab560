//! Experiment harness: presets, configuration, the per-seed pipeline,
//! run bundles and reports.

pub mod bundle;
pub mod config;
pub mod experiment;
pub mod presets;
pub mod report;
pub mod seeds;

pub use bundle::Bundle;
pub use config::{Baseline, ExperimentConfig, Task};
pub use experiment::{collect_results, run_experiment, SeedRun};
pub use presets::{Preset, PresetName};
