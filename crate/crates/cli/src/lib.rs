//! Config-driven experiment runner: data generation, the three-phase
//! training protocol, prediction and evaluation reports.

pub mod commands;
pub mod config;
pub mod outputs;
pub mod pgm;

pub use commands::{
    cmd_defaults, cmd_evaluate, cmd_predict, cmd_synth, cmd_train, EvaluateInput, Evaluation, PredictRequest,
};
pub use config::{DataSource, ExperimentConfig, Overrides};
