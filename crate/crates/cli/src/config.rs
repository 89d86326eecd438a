use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use seaice_core::edge::EdgeOptions;
use seaice_core::grid::FieldSeries;
use seaice_core::metrics::Grouping;
use seaice_core::protocol::ProtocolConfig;
use seaice_core::sif::load_series;
use seaice_core::synth::{synth_generate, SynthConfig};
use serde::{Deserialize, Serialize};

/// Where the observed weekly series comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// A weekly SIF header; relative paths resolve against the config file.
    Sif(PathBuf),
    /// Generated in memory from the experiment seed.
    Synth(SynthConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub protocol: ProtocolConfig,
    pub grouping: Option<Grouping>,
    pub edge: EdgeOptions,
    pub output_dir: PathBuf,
    /// Required, from the file or `--seed`.
    pub seed: Option<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synth(SynthConfig::default()),
            protocol: ProtocolConfig::desk_scale(),
            grouping: None,
            edge: EdgeOptions::default(),
            output_dir: PathBuf::from("out"),
            seed: None,
        }
    }
}

impl ExperimentConfig {
    /// The embedded defaults as printed by `seaice defaults`.
    pub fn template() -> Self {
        Self {
            seed: Some(0),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let DataSource::Sif(p) = &mut cfg.data {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Loads `path` if given, else the defaults, then applies flag overrides.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = overrides.seed {
            cfg.seed = Some(s);
        }
        if let Some(o) = &overrides.out {
            cfg.output_dir = o.clone();
        }
        if let Some(t) = overrides.threshold {
            cfg.edge.threshold = t;
        }
        if let Some(g) = overrides.grouping {
            cfg.grouping = Some(g);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed.is_none() {
            bail!("a seed is required: set \"seed\" in the config or pass --seed");
        }
        if let DataSource::Synth(s) = &self.data {
            s.validate()?;
        }
        self.protocol.validate()?;
        if !(self.edge.threshold > 0.0 && self.edge.threshold < 1.0) {
            bail!("edge threshold {} outside (0, 1)", self.edge.threshold);
        }
        if self.edge.points < 3 {
            bail!("edge contours need at least 3 points");
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated config has a seed")
    }

    /// The observed series; synthetic data uses the experiment seed.
    pub fn load_data(&self) -> Result<FieldSeries> {
        match &self.data {
            DataSource::Sif(p) => load_series(p).with_context(|| format!("loading data {}", p.display())),
            DataSource::Synth(s) => Ok(synth_generate(s, self.seed())?),
        }
    }

    pub fn groupings(&self) -> Vec<Grouping> {
        match self.grouping {
            Some(g) => vec![g],
            None => vec![Grouping::Yearly, Grouping::Quarterly],
        }
    }
}

/// Command-line flags that override config values.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threshold: Option<f64>,
    pub grouping: Option<Grouping>,
}
