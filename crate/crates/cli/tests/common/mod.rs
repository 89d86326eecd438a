#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use seaice_cli::{DataSource, ExperimentConfig};
use seaice_core::protocol::{ProtocolConfig, TrainSettings};
use seaice_core::synth::SynthConfig;
use seaice_core::windowing::{SplitScheme, YearRange};

/// 32x32, 8 synthetic years, tiny networks and a couple of epochs.
pub fn tiny_config(out: &Path, seed: u64) -> ExperimentConfig {
    let short = |epochs| TrainSettings { epochs, learning_rate: 2e-3, ..TrainSettings::default() };
    ExperimentConfig {
        data: DataSource::Synth(SynthConfig { years: 8, ..SynthConfig::default() }),
        protocol: ProtocolConfig {
            split: SplitScheme {
                single_model_train: YearRange::new(2013, 2016),
                ensemble_train: YearRange::new(2017, 2019),
                retrain: YearRange::new(2013, 2019),
                test: YearRange::new(2020, 2020),
            },
            hidden_width: 4,
            kernel_size: 3,
            ensemble_hidden_width: 4,
            ensemble_kernel_size: 3,
            single_training: short(2),
            retraining: short(1),
            ensemble_training: short(2),
            ..ProtocolConfig::default()
        },
        output_dir: out.to_path_buf(),
        seed: Some(seed),
        ..ExperimentConfig::default()
    }
}

pub fn write_config(cfg: &ExperimentConfig, path: &Path) -> PathBuf {
    fs::write(path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_path_buf()
}

pub fn seaice(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seaice")).args(args).output().expect("run seaice")
}

/// Relative paths of every file under `root`, sorted.
pub fn tree(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}
