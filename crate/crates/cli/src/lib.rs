//! Experiment runner around `gptq-core`: layered configuration, single
//! quantization runs, factor sweeps and CSV reports.

pub mod config;
pub mod fixture;
pub mod report;
pub mod run;

pub use config::{resolve, Defaults, ExperimentConfig, Overrides, Preset};
pub use fixture::{build_fixture, write_fixture, Fixture, FixtureSpec};
pub use run::{run_eval, run_oracle, run_quantize, run_sweep, Factor};
