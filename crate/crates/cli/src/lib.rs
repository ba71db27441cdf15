//! Experiment harness for ensemble knowledge distillation: declarative
//! configs, pretrain → joint-train → evaluate pipelines, sweeps over
//! ensemble size or data fraction, and report emission.

pub mod config;
pub mod report;
pub mod runner;

pub use config::{load_config, parse_config, ConfigError, DatasetKind, ExperimentConfig};
pub use runner::{
    load_dataset, load_records, run_experiment, sweep, MetricsRecord, SweepAxis, Variant,
};
