//! Second-layer models that combine the three first-layer forecasts.
//!
//! Members are always ordered `(cnn_mae, cnn_ssim, climatology)`; the CNN
//! ensemblers see them stacked as 156 channels in that order.

use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::bundle::ForecastBundle;
use crate::error::{Error, Result};
use crate::forecaster::{build_model, load_checkpoint, save_checkpoint, train, ModelSpec, ModelState, Sample, TrainConfig, TrainOutcome};
use crate::grid::WEEKS_PER_YEAR;
use crate::metrics::{mae, ssim, LossKind, MetricReport, MetricRow, SsimParams};
use crate::tensor::{clip01, Shape3, Tensor3};

pub const MEMBERS: usize = 3;
pub const DEFAULT_RIDGE: f64 = 1e-3;

/// The three member forecasts for one issue date.
#[derive(Clone, Debug, PartialEq)]
pub struct MemberSet {
    pub cnn_mae: ForecastBundle,
    pub cnn_ssim: ForecastBundle,
    pub climatology: ForecastBundle,
}

impl MemberSet {
    pub fn new(cnn_mae: ForecastBundle, cnn_ssim: ForecastBundle, climatology: ForecastBundle) -> Result<Self> {
        for other in [&cnn_ssim, &climatology] {
            if other.issue_date != cnn_mae.issue_date {
                return Err(Error::Misaligned(format!(
                    "member issue dates {} and {}",
                    cnn_mae.issue_date, other.issue_date
                )));
            }
            if other.values.shape() != cnn_mae.values.shape() || other.mask != cnn_mae.mask {
                return Err(Error::Shape("members differ in shape or mask".into()));
            }
        }
        Ok(Self {
            cnn_mae,
            cnn_ssim,
            climatology,
        })
    }

    pub fn issue_date(&self) -> NaiveDate {
        self.cnn_mae.issue_date
    }

    pub fn members(&self) -> [&ForecastBundle; MEMBERS] {
        [&self.cnn_mae, &self.cnn_ssim, &self.climatology]
    }

    pub fn shape(&self) -> Shape3 {
        self.cnn_mae.values.shape()
    }

    /// `3 x 52` channel input for the CNN ensemblers.
    pub fn stacked(&self) -> Tensor3<f32> {
        let [a, b, c] = self.members();
        Tensor3::concat_channels(&[&a.values, &b.values, &c.values]).expect("members share a shape")
    }
}

/// Per `(channel, y, x)` regression `w1 m1 + w2 m2 + w3 m3 + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearEnsemble {
    pub shape: Shape3,
    /// `[w1, w2, w3, b]` for every element, in tensor order.
    pub coefficients: Vec<[f64; 4]>,
}

impl LinearEnsemble {
    pub fn predict_raw(&self, members: &MemberSet) -> Result<Tensor3<f32>> {
        if members.shape() != self.shape {
            return Err(Error::Shape(format!(
                "linear ensemble fitted on {}, members are {}",
                self.shape,
                members.shape()
            )));
        }
        let [a, b, c] = members.members().map(|m| m.values.as_slice());
        let out = self
            .coefficients
            .iter()
            .enumerate()
            .map(|(i, w)| (w[0] * a[i] as f64 + w[1] * b[i] as f64 + w[2] * c[i] as f64 + w[3]) as f32)
            .collect();
        Tensor3::from_vec(self.shape, out)
    }
}

fn check_training_set(members: &[MemberSet], targets: &[Tensor3<f32>]) -> Result<Shape3> {
    let first = members.first().ok_or_else(|| Error::Empty("no ensemble training dates".into()))?;
    if members.len() != targets.len() {
        return Err(Error::Shape(format!("{} member sets but {} targets", members.len(), targets.len())));
    }
    let shape = first.shape();
    for (m, t) in members.iter().zip(targets) {
        if m.shape() != shape || t.shape() != shape {
            return Err(Error::Shape(format!(
                "ensemble sample {}: members {}, target {}, expected {shape}",
                m.issue_date(),
                m.shape(),
                t.shape()
            )));
        }
    }
    Ok(shape)
}

/// Ridge fit per element with an unpenalised intercept.
pub fn fit_linear_ensemble(members: &[MemberSet], targets: &[Tensor3<f32>], ridge: f64) -> Result<LinearEnsemble> {
    let shape = check_training_set(members, targets)?;
    if !(ridge > 0.0) {
        return Err(Error::Config(format!("ridge strength {ridge} must be positive")));
    }
    let n = members.len() as f64;
    let cols: Vec<[&[f32]; MEMBERS]> = members.iter().map(|m| m.members().map(|b| b.values.as_slice())).collect();
    let mut coefficients = Vec::with_capacity(shape.len());
    for i in 0..shape.len() {
        let xbar = Vector3::from_fn(|j, _| cols.iter().map(|c| c[j][i] as f64).sum::<f64>() / n);
        let ybar = targets.iter().map(|t| t.as_slice()[i] as f64).sum::<f64>() / n;
        let mut gram = Matrix3::identity() * ridge;
        let mut rhs = Vector3::zeros();
        for (c, t) in cols.iter().zip(targets) {
            let x = Vector3::from_fn(|j, _| c[j][i] as f64) - xbar;
            let y = t.as_slice()[i] as f64 - ybar;
            gram += x * x.transpose();
            rhs += x * y;
        }
        let w = gram
            .cholesky()
            .ok_or_else(|| Error::Config("ridge system is not positive definite".into()))?
            .solve(&rhs);
        let b = ybar - w.dot(&xbar);
        coefficients.push([w[0], w[1], w[2], b]);
    }
    Ok(LinearEnsemble { shape, coefficients })
}

/// Trains a 156-in / 52-out CNN on stacked members.
pub fn fit_cnn_ensemble(
    members: &[MemberSet],
    targets: &[Tensor3<f32>],
    spec: &ModelSpec,
    cfg: &TrainConfig,
    init_seed: u64,
    init: Option<ModelState>,
) -> Result<TrainOutcome> {
    check_training_set(members, targets)?;
    if spec.input_channels != MEMBERS * WEEKS_PER_YEAR {
        return Err(Error::Config(format!(
            "ensemble CNN needs {} input channels, spec has {}",
            MEMBERS * WEEKS_PER_YEAR,
            spec.input_channels
        )));
    }
    let model = match init {
        Some(m) if &m.spec == spec => m,
        Some(_) => return Err(Error::Config("initial ensemble model does not match spec".into())),
        None => build_model(spec, init_seed)?,
    };
    let inputs: Vec<Tensor3<f32>> = members.iter().map(MemberSet::stacked).collect();
    let samples: Vec<Sample<'_, f32>> = inputs
        .iter()
        .zip(targets)
        .map(|(input, target)| Sample { input, target })
        .collect();
    train(model, &samples, cfg, &members[0].cnn_mae.mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleKind {
    Linear,
    CnnMae,
    CnnSsim,
}

impl EnsembleKind {
    pub const ALL: [EnsembleKind; 3] = [EnsembleKind::Linear, EnsembleKind::CnnMae, EnsembleKind::CnnSsim];

    pub fn as_str(&self) -> &'static str {
        match self {
            EnsembleKind::Linear => "linear",
            EnsembleKind::CnnMae => "cnn_mae",
            EnsembleKind::CnnSsim => "cnn_ssim",
        }
    }

    pub fn loss(&self) -> Option<LossKind> {
        match self {
            EnsembleKind::Linear => None,
            EnsembleKind::CnnMae => Some(LossKind::Mae),
            EnsembleKind::CnnSsim => Some(LossKind::Ssim),
        }
    }
}

impl std::fmt::Display for EnsembleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EnsembleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ensemble kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EnsembleModel {
    Linear(LinearEnsemble),
    CnnMae(ModelState),
    CnnSsim(ModelState),
}

impl EnsembleModel {
    pub fn kind(&self) -> EnsembleKind {
        match self {
            EnsembleModel::Linear(_) => EnsembleKind::Linear,
            EnsembleModel::CnnMae(_) => EnsembleKind::CnnMae,
            EnsembleModel::CnnSsim(_) => EnsembleKind::CnnSsim,
        }
    }
}

pub fn ensemble_predict(model: &EnsembleModel, members: &MemberSet) -> Result<ForecastBundle> {
    let values = match model {
        EnsembleModel::Linear(l) => clip01(&l.predict_raw(members)?),
        EnsembleModel::CnnMae(m) | EnsembleModel::CnnSsim(m) => m.predict(&members.stacked())?,
    };
    let base = &members.cnn_mae;
    ForecastBundle::new(
        base.issue_date,
        values,
        base.geometry,
        base.mask.clone(),
        format!("ensemble_{}", model.kind()),
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionCriterion {
    /// Highest SSIM, ties broken by lowest MAE.
    #[default]
    SsimFirst,
    /// Lowest MAE, ties broken by highest SSIM.
    MaeFirst,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub best: usize,
    /// One row per candidate, labelled by kind, in candidate order.
    pub report: MetricReport,
}

/// Scores every candidate on the validation dates and picks the best.
pub fn select_ensemble(
    candidates: &[EnsembleModel],
    members: &[MemberSet],
    targets: &[Tensor3<f32>],
    params: &SsimParams,
    criterion: SelectionCriterion,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::Empty("no ensemble candidates".into()));
    }
    check_training_set(members, targets)?;
    let mask = &members[0].cnn_mae.mask;
    let mut rows = Vec::with_capacity(candidates.len());
    for c in candidates {
        let (mut m, mut s) = (0.0, 0.0);
        for (set, target) in members.iter().zip(targets) {
            let pred = ensemble_predict(c, set)?;
            m += mae(&pred.values, target, mask)?;
            s += ssim(&pred.values, target, mask, params)?;
        }
        let n = members.len() as f64;
        rows.push(MetricRow {
            period: c.kind().to_string(),
            mae: m / n,
            ssim: s / n,
            steps: members.len() * WEEKS_PER_YEAR,
        });
    }
    let better = |a: &MetricRow, b: &MetricRow| match criterion {
        SelectionCriterion::SsimFirst => a.ssim > b.ssim || (a.ssim == b.ssim && a.mae < b.mae),
        SelectionCriterion::MaeFirst => a.mae < b.mae || (a.mae == b.mae && a.ssim > b.ssim),
    };
    let mut best = 0;
    for i in 1..rows.len() {
        if better(&rows[i], &rows[best]) {
            best = i;
        }
    }
    Ok(Selection {
        best,
        report: MetricReport { rows },
    })
}

const ENSEMBLE_MAGIC: &str = "SEAICE-ENSEMBLE";
const ENSEMBLE_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EnsembleHeader {
    magic: String,
    version: u32,
    kind: EnsembleKind,
    /// Linear: `[w1, w2, w3, b]` per element as f64 LE. CNN: a model checkpoint header.
    payload_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shape: Option<Shape3>,
}

/// Writes `<path>` plus `<stem>.coef.bin` (linear) or `<stem>.cnn.json` and
/// its parameter file (CNN kinds).
pub fn save_ensemble(model: &EnsembleModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "ensemble".into());
    let (payload_file, shape) = match model {
        EnsembleModel::Linear(l) => {
            let name = format!("{stem}.coef.bin");
            let bytes: Vec<u8> = l.coefficients.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
            let p = path.with_file_name(&name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
            (name, Some(l.shape))
        }
        EnsembleModel::CnnMae(m) | EnsembleModel::CnnSsim(m) => {
            let name = format!("{stem}.cnn.json");
            save_checkpoint(m, path.with_file_name(&name))?;
            (name, None)
        }
    };
    let header = EnsembleHeader {
        magic: ENSEMBLE_MAGIC.into(),
        version: ENSEMBLE_VERSION,
        kind: model.kind(),
        payload_file,
        shape,
    };
    let json = serde_json::to_string_pretty(&header).map_err(|e| Error::json(path, e))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_ensemble(path: impl AsRef<Path>) -> Result<EnsembleModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: EnsembleHeader = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if header.magic != ENSEMBLE_MAGIC || header.version != ENSEMBLE_VERSION {
        return Err(Error::Checkpoint(format!(
            "{} is not a version-{ENSEMBLE_VERSION} ensemble checkpoint",
            path.display()
        )));
    }
    let payload = path.with_file_name(&header.payload_file);
    match header.kind {
        EnsembleKind::Linear => {
            let shape = header
                .shape
                .ok_or_else(|| Error::Checkpoint("linear ensemble header lacks a shape".into()))?;
            let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
            let expected = shape.len() * 4 * 8;
            if bytes.len() != expected {
                return Err(Error::PayloadSize {
                    path: payload,
                    expected,
                    found: bytes.len(),
                });
            }
            let vals: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let coefficients = vals.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
            Ok(EnsembleModel::Linear(LinearEnsemble { shape, coefficients }))
        }
        kind => {
            let m = load_checkpoint(&payload)?;
            if m.spec.input_channels != MEMBERS * WEEKS_PER_YEAR {
                return Err(Error::Checkpoint(format!(
                    "ensemble CNN has {} input channels",
                    m.spec.input_channels
                )));
            }
            Ok(if kind == EnsembleKind::CnnMae {
                EnsembleModel::CnnMae(m)
            } else {
                EnsembleModel::CnnSsim(m)
            })
        }
    }
}
