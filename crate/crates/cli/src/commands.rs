use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use chrono::NaiveDate;
use log::info;
use seaice_core::bundle::ForecastBundle;
use seaice_core::climatology::climatology_forecast;
use seaice_core::edge::{edge_distance_steps, summarize_edges, write_edge_csv, WeekEdge};
use seaice_core::ensemble::{ensemble_predict, load_ensemble, save_ensemble, EnsembleKind, EnsembleModel};
use seaice_core::forecaster::{load_checkpoint, save_checkpoint, ModelState};
use seaice_core::grid::FieldSeries;
use seaice_core::metrics::{evaluate_steps, Grouping, MetricReport, MetricRow};
use seaice_core::protocol::{member_forecasts, run_protocol, test_issue_dates, TrainedSystem};
use seaice_core::sif::{load_series, save_series};
use seaice_core::synth::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig};
use crate::outputs::Outputs;
use crate::pgm::encode_pgm;

pub const MODELS_DIR: &str = "models";
pub const HISTORY_DIR: &str = "history";
pub const FORECASTS_DIR: &str = "forecasts";
const SELECTION_FILE: &str = "selection.json";

/// Writes the synthetic observations as `<out>/observations.json` and its
/// payloads.
pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let synth = match &cfg.data {
        DataSource::Synth(s) => s.clone(),
        DataSource::Sif(_) => SynthConfig::default(),
    };
    let series = seaice_core::synth::synth_generate(&synth, cfg.seed())?;
    let mut out = Outputs::new(&cfg.output_dir)?;
    let path = write_sif(&mut out, "observations.json", &series)?;
    out.commit();
    info!("wrote {} weekly frames to {}", series.len(), path.display());
    Ok(path)
}

fn write_sif(out: &mut Outputs, rel: impl AsRef<Path>, series: &FieldSeries) -> Result<PathBuf> {
    let path = out.file(rel)?;
    let stem = path.file_stem().expect("file name").to_string_lossy().into_owned();
    out.register(path.with_file_name(format!("{stem}.mask.bin")));
    out.register(path.with_file_name(format!("{stem}.data.bin")));
    save_series(series, &path)?;
    Ok(path)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SelectionRecord {
    selected: EnsembleKind,
    validation: Vec<MetricRow>,
}

/// Runs the three-phase protocol and writes every checkpoint and loss history.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainedSystem> {
    let series = cfg.load_data()?;
    let mut out = Outputs::new(&cfg.output_dir)?;
    let system = run_protocol(&series, &cfg.protocol, cfg.seed())?;

    out.write("config.json", serde_json::to_string_pretty(cfg)?)?;
    for (name, model) in [("cnn_mae", &system.cnn_mae), ("cnn_ssim", &system.cnn_ssim)] {
        let path = out.file(Path::new(MODELS_DIR).join(format!("{name}.json")))?;
        save_checkpoint(model, &path)?;
        out.register_siblings(&path)?;
    }
    for model in &system.ensembles {
        let path = out.file(Path::new(MODELS_DIR).join(format!("ensemble_{}.json", model.kind())))?;
        save_ensemble(model, &path)?;
        out.register_siblings(&path)?;
    }
    let record = SelectionRecord {
        selected: system.selected_ensemble().kind(),
        validation: system.selection_report.rows.clone(),
    };
    out.write(Path::new(MODELS_DIR).join(SELECTION_FILE), serde_json::to_string_pretty(&record)?)?;
    for (name, history) in &system.histories {
        let mut csv = String::from("epoch,loss\n");
        for (e, l) in history.iter().enumerate() {
            csv.push_str(&format!("{e},{l}\n"));
        }
        out.write(Path::new(HISTORY_DIR).join(format!("{name}.csv")), csv)?;
    }
    out.commit();
    info!("selected ensemble: {}", record.selected);
    Ok(system)
}

/// Loads the models written by [`cmd_train`].
pub fn load_system(models: &Path) -> Result<TrainedSystem> {
    let cnn_mae = load_checkpoint(models.join("cnn_mae.json"))?;
    let cnn_ssim = load_checkpoint(models.join("cnn_ssim.json"))?;
    let sel_path = models.join(SELECTION_FILE);
    let record: SelectionRecord = serde_json::from_str(
        &fs::read_to_string(&sel_path).with_context(|| format!("reading {}", sel_path.display()))?,
    )
    .with_context(|| format!("parsing {}", sel_path.display()))?;
    let mut ensembles = Vec::new();
    for kind in EnsembleKind::ALL {
        let p = models.join(format!("ensemble_{kind}.json"));
        if p.exists() {
            ensembles.push(load_ensemble(&p)?);
        }
    }
    let selected = ensembles
        .iter()
        .position(|m| m.kind() == record.selected)
        .ok_or_else(|| anyhow!("selected ensemble {} has no checkpoint", record.selected))?;
    Ok(TrainedSystem {
        cnn_mae,
        cnn_ssim,
        ensembles,
        selected,
        selection_report: MetricReport { rows: record.validation },
        histories: Vec::new(),
    })
}

/// What `predict` runs: a forecaster, an ensembler with its member
/// forecasters, or climatology.
pub enum Predictor {
    Climatology,
    Single(ModelState),
    Ensemble {
        model: EnsembleModel,
        cnn_mae: ModelState,
        cnn_ssim: ModelState,
    },
}

impl Predictor {
    /// `climatology`, a forecaster checkpoint, or an ensemble checkpoint
    /// whose directory also holds `cnn_mae.json` and `cnn_ssim.json`.
    pub fn load(spec: &str) -> Result<Self> {
        if spec == "climatology" {
            return Ok(Predictor::Climatology);
        }
        let path = Path::new(spec);
        let text = fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        let header: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        match header.get("magic").and_then(|m| m.as_str()) {
            Some("SEAICE-CNN") => Ok(Predictor::Single(load_checkpoint(path)?)),
            Some("SEAICE-ENSEMBLE") => {
                let dir = path.parent().unwrap_or(Path::new("."));
                Ok(Predictor::Ensemble {
                    model: load_ensemble(path)?,
                    cnn_mae: load_checkpoint(dir.join("cnn_mae.json")).context("loading ensemble member cnn_mae")?,
                    cnn_ssim: load_checkpoint(dir.join("cnn_ssim.json")).context("loading ensemble member cnn_ssim")?,
                })
            }
            _ => bail!("{} is not a model or ensemble checkpoint", path.display()),
        }
    }

    pub fn forecast(&self, series: &FieldSeries, issue: NaiveDate) -> Result<ForecastBundle> {
        Ok(match self {
            Predictor::Climatology => climatology_forecast(series, issue)?,
            Predictor::Single(m) => m.forecast(series, issue, "cnn")?,
            Predictor::Ensemble { model, cnn_mae, cnn_ssim } => {
                ensemble_predict(model, &member_forecasts(cnn_mae, cnn_ssim, series, issue)?)?
            }
        })
    }
}

#[derive(Clone, Debug)]
pub struct PredictRequest {
    pub checkpoint: String,
    /// Observations; `None` uses the config's data source.
    pub data: Option<PathBuf>,
    pub issue: NaiveDate,
    /// Forecast weeks (0-based lead) to render as PGM.
    pub weeks: Vec<usize>,
}

/// Writes `<out>/forecast.json` (52 weekly frames) and `week_NN.pgm` files.
pub fn cmd_predict(cfg: &ExperimentConfig, req: &PredictRequest) -> Result<ForecastBundle> {
    let series = match &req.data {
        Some(p) => load_series(p).with_context(|| format!("loading data {}", p.display()))?,
        None => cfg.load_data()?,
    };
    if let Some(w) = req.weeks.iter().find(|&&w| w >= 52) {
        bail!("week {w} outside the 52-week forecast");
    }
    let predictor = Predictor::load(&req.checkpoint)?;
    let bundle = predictor.forecast(&series, req.issue)?;
    let mut out = Outputs::new(&cfg.output_dir)?;
    write_sif(&mut out, "forecast.json", &bundle.to_series())?;
    for &w in &req.weeks {
        let g = bundle.geometry;
        out.write(format!("week_{w:02}.pgm"), encode_pgm(bundle.values.channel(w), g.height, g.width))?;
    }
    out.commit();
    Ok(bundle)
}

/// A named forecast made of one or more weekly series.
#[derive(Clone, Debug)]
pub struct ForecastSource {
    pub name: String,
    pub series: Vec<FieldSeries>,
}

/// Parses `name=path` pairs, grouping repeated names.
pub fn load_sources(specs: &[String]) -> Result<Vec<ForecastSource>> {
    let mut by_name: BTreeMap<String, Vec<FieldSeries>> = BTreeMap::new();
    let mut order = Vec::new();
    for spec in specs {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| anyhow!("forecast {spec:?} must be NAME=PATH"))?;
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            bail!("forecast name {name:?} must be alphanumeric");
        }
        let s = load_series(path).with_context(|| format!("loading forecast {path}"))?;
        if !by_name.contains_key(name) {
            order.push(name.to_string());
        }
        by_name.entry(name.to_string()).or_default().push(s);
    }
    Ok(order
        .into_iter()
        .map(|name| {
            let series = by_name.remove(&name).expect("collected");
            ForecastSource { name, series }
        })
        .collect())
}

/// Forecasts of every source for the test issue dates of a trained system.
pub fn system_sources(system: &TrainedSystem, series: &FieldSeries, issues: &[NaiveDate]) -> Result<Vec<ForecastSource>> {
    let mut by_name: Vec<ForecastSource> = Vec::new();
    for &issue in issues {
        for (name, bundle) in seaice_core::protocol::forecast_sources(system, series, issue)? {
            let s = bundle.to_series();
            match by_name.iter_mut().find(|f| f.name == name) {
                Some(f) => f.series.push(s),
                None => by_name.push(ForecastSource { name, series: vec![s] }),
            }
        }
    }
    Ok(by_name)
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Per grouping, one report per source in source order.
    pub tables: Vec<(Grouping, Vec<(String, MetricReport)>)>,
    pub edges: Vec<(String, Vec<WeekEdge>)>,
}

impl Evaluation {
    pub fn report(&self, grouping: Grouping, source: &str) -> Option<&MetricReport> {
        self.tables
            .iter()
            .find(|(g, _)| *g == grouping)?
            .1
            .iter()
            .find(|(n, _)| n == source)
            .map(|(_, r)| r)
    }
}

#[derive(Clone, Debug)]
pub enum EvaluateInput {
    /// Explicit forecast files against an actual series.
    Files { actual: PathBuf, forecasts: Vec<String> },
    /// Forecast the test years with models from [`cmd_train`].
    Models(PathBuf),
}

/// Writes `metrics_<grouping>.csv` (one column group per source) and
/// `edges_<source>.csv`; with trained models also the forecast SIFs.
pub fn cmd_evaluate(cfg: &ExperimentConfig, input: &EvaluateInput) -> Result<Evaluation> {
    let mut out = Outputs::new(&cfg.output_dir)?;
    let (actual, sources) = match input {
        EvaluateInput::Files { actual, forecasts } => {
            if forecasts.is_empty() {
                bail!("no forecasts to evaluate");
            }
            let a = load_series(actual).with_context(|| format!("loading actuals {}", actual.display()))?;
            (a, load_sources(forecasts)?)
        }
        EvaluateInput::Models(dir) => {
            let series = cfg.load_data()?;
            let system = load_system(dir)?;
            let issues = test_issue_dates(&cfg.protocol.split);
            let sources = system_sources(&system, &series, &issues)?;
            for s in &sources {
                for (f, issue) in s.series.iter().zip(&issues) {
                    write_sif(&mut out, Path::new(FORECASTS_DIR).join(format!("{}_{issue}.json", s.name)), f)?;
                }
            }
            (series, sources)
        }
    };
    let evaluation = evaluate_sources(&actual, &sources, cfg)?;
    for (grouping, reports) in &evaluation.tables {
        out.write(format!("metrics_{}.csv", grouping.as_str()), metrics_table(reports))?;
    }
    for (name, weeks) in &evaluation.edges {
        let mut buf = Vec::new();
        write_edge_csv(weeks, &mut buf)?;
        out.write(format!("edges_{name}.csv"), buf)?;
        if let Some(s) = summarize_edges(weeks) {
            info!("{name}: mean edge distance {:.3} cells over {} weeks", s.mean, weeks.len());
        }
    }
    out.commit();
    Ok(evaluation)
}

pub fn evaluate_sources(actual: &FieldSeries, sources: &[ForecastSource], cfg: &ExperimentConfig) -> Result<Evaluation> {
    let mut tables = Vec::new();
    for grouping in cfg.groupings() {
        let mut reports = Vec::new();
        for s in sources {
            let mask = common_mask(s)?;
            let steps = s.series.iter().flat_map(|f| f.timestamps().iter().copied().zip(f.frames().iter().map(Vec::as_slice)));
            let report = evaluate_steps(steps, &mask, actual, grouping, &cfg.protocol.ssim)
                .with_context(|| format!("evaluating {}", s.name))?;
            reports.push((s.name.clone(), report));
        }
        tables.push((grouping, reports));
    }
    let mut edges = Vec::new();
    for s in sources {
        let mask = common_mask(s)?;
        let steps = s.series.iter().flat_map(|f| f.timestamps().iter().copied().zip(f.frames().iter().map(Vec::as_slice)));
        let weeks = edge_distance_steps(steps, &mask, actual, &cfg.edge).with_context(|| format!("edge distances of {}", s.name))?;
        edges.push((s.name.clone(), weeks));
    }
    Ok(Evaluation { tables, edges })
}

fn common_mask(s: &ForecastSource) -> Result<Vec<bool>> {
    let first = s.series.first().ok_or_else(|| anyhow!("forecast {} has no data", s.name))?;
    if s.series.iter().any(|f| f.mask() != first.mask()) {
        bail!("forecast files of {} disagree on the grid mask", s.name);
    }
    Ok(first.mask().to_vec())
}

/// `period,<a>_mae,<a>_ssim,<b>_mae,...`; a source without a period leaves
/// its cells empty.
pub fn metrics_table(reports: &[(String, MetricReport)]) -> String {
    let mut periods: Vec<&str> = reports.iter().flat_map(|(_, r)| r.rows.iter().map(|row| row.period.as_str())).collect();
    periods.sort_unstable();
    periods.dedup();
    let mut out = String::from("period");
    for (name, _) in reports {
        out.push_str(&format!(",{name}_mae,{name}_ssim"));
    }
    out.push('\n');
    for p in periods {
        out.push_str(p);
        for (_, r) in reports {
            match r.row(p) {
                Some(row) => out.push_str(&format!(",{},{}", row.mae, row.ssim)),
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

/// The embedded defaults as pretty JSON.
pub fn cmd_defaults() -> Result<String> {
    Ok(serde_json::to_string_pretty(&ExperimentConfig::template())?)
}
