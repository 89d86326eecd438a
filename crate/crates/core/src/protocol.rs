//! The three-phase training protocol and test-time forecasting.
//!
//! 1. Train the MAE and SSIM forecasters on the single-model years.
//! 2. Forecast every ensemble-training issue date with those models and
//!    climatology, then fit the ensemblers on the member forecasts. The last
//!    issue dates are held out to choose among ensemblers.
//! 3. Fine-tune both forecasters on the retrain years.
//!
//! At test time the retrained forecasters and climatology feed the selected
//! ensembler.

use chrono::NaiveDate;
use log::info;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::ForecastBundle;
use crate::climatology::{climatology_forecast, CLIMATOLOGY_YEARS};
use crate::ensemble::{
    ensemble_predict, fit_cnn_ensemble, fit_linear_ensemble, select_ensemble, EnsembleKind, EnsembleModel, MemberSet,
    SelectionCriterion, DEFAULT_RIDGE, MEMBERS,
};
use crate::error::{Error, Result};
use crate::forecaster::{build_model, train_pairs, ModelSpec, ModelState, TrainConfig};
use crate::grid::{global_week, week_start, Cadence, FieldSeries, WEEKS_PER_YEAR};
use crate::metrics::{LossKind, MetricReport, SsimParams};
use crate::tensor::Tensor3;
use crate::windowing::{make_training_pairs, split_series, SplitScheme, YearRange};

/// Optimiser settings shared by every model trained in one phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 60,
            learning_rate: 1e-3,
            batch_size: 4,
            patience: 0,
        }
    }
}

impl TrainSettings {
    fn config(&self, loss: LossKind, seed: u64, ssim: SsimParams) -> TrainConfig {
        TrainConfig {
            loss,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed,
            patience: self.patience,
            ssim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub split: SplitScheme,
    /// Weeks of pre-history fed to the forecasters (`k`).
    pub history_weeks: usize,
    pub hidden_width: usize,
    pub kernel_size: usize,
    pub ensemble_hidden_width: usize,
    pub ensemble_kernel_size: usize,
    pub single_training: TrainSettings,
    /// Start the SSIM forecaster and the SSIM ensembler from their trained
    /// MAE counterparts instead of a fresh initialisation.
    pub ssim_from_mae: bool,
    /// Fine-tuning on the retrain years, starting from the phase-1 weights.
    pub retraining: TrainSettings,
    pub ensemble_training: TrainSettings,
    pub ensembles: Vec<EnsembleKind>,
    /// Weeks between consecutive training-pair issue dates.
    pub pair_stride: usize,
    /// Weeks between consecutive ensemble-training issue dates.
    pub ensemble_stride: usize,
    /// Ensemble issue dates lie within this many weeks of the start of a
    /// year, matching the January issues used for testing; 0 keeps only
    /// annual issues.
    pub ensemble_season_weeks: usize,
    /// Share of the ensemble issue dates held out for selection.
    pub validation_fraction: f64,
    pub ridge: f64,
    pub selection: SelectionCriterion,
    pub ssim: SsimParams,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            split: SplitScheme::long_record(),
            history_weeks: 2 * WEEKS_PER_YEAR,
            hidden_width: 64,
            kernel_size: 5,
            ensemble_hidden_width: 64,
            ensemble_kernel_size: 5,
            single_training: TrainSettings::default(),
            ssim_from_mae: true,
            retraining: TrainSettings {
                epochs: 20,
                ..TrainSettings::default()
            },
            ensemble_training: TrainSettings::default(),
            ensembles: EnsembleKind::ALL.to_vec(),
            pair_stride: 4,
            ensemble_stride: 1,
            ensemble_season_weeks: 0,
            validation_fraction: 0.25,
            ridge: DEFAULT_RIDGE,
            selection: SelectionCriterion::SsimFirst,
            ssim: SsimParams::default(),
        }
    }
}

impl ProtocolConfig {
    /// Split and model sizes for a 10-year synthetic series starting in 2013.
    pub fn desk_scale() -> Self {
        Self {
            split: SplitScheme {
                single_model_train: YearRange::new(2013, 2017),
                ensemble_train: YearRange::new(2018, 2020),
                retrain: YearRange::new(2013, 2020),
                test: YearRange::new(2021, 2022),
            },
            hidden_width: 16,
            kernel_size: 3,
            ensemble_hidden_width: 16,
            ensemble_kernel_size: 3,
            single_training: TrainSettings {
                epochs: 100,
                learning_rate: 2e-3,
                ..TrainSettings::default()
            },
            ensemble_training: TrainSettings {
                epochs: 200,
                learning_rate: 2e-3,
                ..TrainSettings::default()
            },
            ensemble_season_weeks: 8,
            ..Self::default()
        }
    }

    pub fn forecaster_spec(&self) -> ModelSpec {
        ModelSpec::new(self.history_weeks, self.hidden_width, self.kernel_size)
    }

    pub fn ensembler_spec(&self) -> ModelSpec {
        ModelSpec::new(MEMBERS * WEEKS_PER_YEAR, self.ensemble_hidden_width, self.ensemble_kernel_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.forecaster_spec().validate()?;
        if self.ensembles.iter().any(|k| k.loss().is_some()) {
            self.ensembler_spec().validate()?;
        }
        if self.pair_stride == 0 || self.ensemble_stride == 0 {
            return Err(Error::Config("strides must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!("validation_fraction {} outside [0, 1)", self.validation_fraction)));
        }
        if self.ensembles.is_empty() {
            return Err(Error::Config("at least one ensemble kind is required".into()));
        }
        for s in [&self.single_training, &self.retraining, &self.ensemble_training] {
            s.config(LossKind::Mae, 0, self.ssim).validate()?;
        }
        Ok(())
    }
}

/// Independent per-purpose seeds drawn from the master seed.
#[derive(Clone, Copy, Debug)]
struct Seeds {
    init_mae: u64,
    init_ssim: u64,
    shuffle_mae: u64,
    shuffle_ssim: u64,
    retrain_mae: u64,
    retrain_ssim: u64,
    ensemble_init: u64,
    ensemble_shuffle: u64,
}

impl Seeds {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut next = || rng.next_u64();
        Self {
            init_mae: next(),
            init_ssim: next(),
            shuffle_mae: next(),
            shuffle_ssim: next(),
            retrain_mae: next(),
            retrain_ssim: next(),
            ensemble_init: next(),
            ensemble_shuffle: next(),
        }
    }
}

/// Everything the protocol produces.
#[derive(Clone, Debug)]
pub struct TrainedSystem {
    /// Retrained forecasters used at test time.
    pub cnn_mae: ModelState,
    pub cnn_ssim: ModelState,
    pub ensembles: Vec<EnsembleModel>,
    /// Index into `ensembles` of the selected model.
    pub selected: usize,
    /// Validation scores of each ensembler, in `ensembles` order.
    pub selection_report: MetricReport,
    /// Per-epoch training loss of every model, keyed by name.
    pub histories: Vec<(String, Vec<f64>)>,
}

impl TrainedSystem {
    pub fn selected_ensemble(&self) -> &EnsembleModel {
        &self.ensembles[self.selected]
    }
}

fn first_week(series: &FieldSeries) -> Result<i64> {
    if series.cadence() != Cadence::Weekly {
        return Err(Error::Config("the protocol needs a weekly series".into()));
    }
    series
        .timestamps()
        .first()
        .and_then(|&d| global_week(d))
        .ok_or_else(|| Error::Empty("empty series".into()))
}

/// Issue dates inside `years` whose whole 52-week target lies in `years`
/// and whose week of year is within `season` weeks of week 0.
pub fn issue_dates_within(years: YearRange, stride: usize, season: usize) -> Vec<NaiveDate> {
    if years.is_empty() {
        return Vec::new();
    }
    let wpy = WEEKS_PER_YEAR as i64;
    let first = years.start as i64 * wpy;
    let last = years.end as i64 * wpy;
    (first..=last)
        .filter(|w| {
            let wk = w.rem_euclid(wpy);
            wk.min(wpy - wk) <= season as i64
        })
        .step_by(stride.max(1))
        .map(week_start)
        .collect()
}

/// January issue dates of the test years.
pub fn test_issue_dates(split: &SplitScheme) -> Vec<NaiveDate> {
    issue_dates_within(split.test, 1, 0)
}

/// The 52 actual frames starting at `issue_date`.
pub fn target_for(series: &FieldSeries, issue_date: NaiveDate) -> Result<Tensor3<f32>> {
    let issue = global_week(issue_date)
        .ok_or_else(|| Error::Misaligned(format!("{issue_date} does not start a calendar week")))?;
    let start = issue - first_week(series)?;
    if start < 0 || start as usize + WEEKS_PER_YEAR > series.len() {
        return Err(Error::Misaligned(format!("no full year of actuals from {issue_date}")));
    }
    let start = start as usize;
    Ok(series.tensor(start..start + WEEKS_PER_YEAR))
}

pub fn member_forecasts(
    cnn_mae: &ModelState,
    cnn_ssim: &ModelState,
    series: &FieldSeries,
    issue_date: NaiveDate,
) -> Result<MemberSet> {
    MemberSet::new(
        cnn_mae.forecast(series, issue_date, "cnn_mae")?,
        cnn_ssim.forecast(series, issue_date, "cnn_ssim")?,
        climatology_forecast(series, issue_date)?,
    )
}

pub fn run_protocol(series: &FieldSeries, cfg: &ProtocolConfig, seed: u64) -> Result<TrainedSystem> {
    cfg.validate()?;
    first_week(series)?;
    let seeds = Seeds::new(seed);
    let k = cfg.history_weeks;
    let mask = series.mask().to_vec();
    let split = split_series(series, &cfg.split)?;
    let mut histories = Vec::new();

    // Phase 1: single models.
    let phase = "single-model training";
    let pairs = make_training_pairs(&split.single_model_train, k, WEEKS_PER_YEAR, cfg.pair_stride)
        .map_err(|e| e.in_phase(phase))?;
    let spec = cfg.forecaster_spec();
    let mut singles = Vec::with_capacity(2);
    for (loss, init, shuffle) in [
        (LossKind::Mae, seeds.init_mae, seeds.shuffle_mae),
        (LossKind::Ssim, seeds.init_ssim, seeds.shuffle_ssim),
    ] {
        info!("{phase}: cnn_{loss} on {} pairs", pairs.len());
        let model = match singles.first() {
            Some(mae) if cfg.ssim_from_mae => ModelState::clone(mae),
            _ => build_model(&spec, init).map_err(|e| e.in_phase(phase))?,
        };
        let out = train_pairs(model, &pairs, &cfg.single_training.config(loss, shuffle, cfg.ssim), &mask)
            .map_err(|e| e.in_phase(phase))?;
        histories.push((format!("cnn_{loss}"), out.history));
        singles.push(out.model);
    }
    drop(pairs);

    // Phase 2: ensemblers on member forecasts.
    let phase = "ensemble fitting";
    let issues = issue_dates_within(cfg.split.ensemble_train, cfg.ensemble_stride, cfg.ensemble_season_weeks);
    let history_needed = (CLIMATOLOGY_YEARS * WEEKS_PER_YEAR).max(k);
    let mut sets = Vec::with_capacity(issues.len());
    let mut targets = Vec::with_capacity(issues.len());
    for &d in &issues {
        let week = global_week(d).expect("week start");
        if week - first_week(series)? < history_needed as i64 {
            continue;
        }
        let set = member_forecasts(&singles[0], &singles[1], series, d).map_err(|e| e.in_phase(phase))?;
        sets.push(set);
        targets.push(target_for(series, d).map_err(|e| e.in_phase(phase))?);
    }
    if sets.is_empty() {
        return Err(Error::InsufficientHistory(format!(
            "no ensemble issue date in {} has {history_needed} weeks of history",
            cfg.split.ensemble_train
        ))
        .in_phase(phase));
    }
    let held = if sets.len() >= 2 {
        ((sets.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, sets.len() - 1)
    } else {
        0
    };
    let fit_n = sets.len() - held;
    // With a single date there is nothing to hold out; score on the fit set.
    let (val_sets, val_targets) = if held > 0 {
        (&sets[fit_n..], &targets[fit_n..])
    } else {
        (&sets[..], &targets[..])
    };
    info!("{phase}: {fit_n} fit dates, {} validation dates", val_sets.len());
    let fit_all = |sets: &[MemberSet], targets: &[Tensor3<f32>], histories: &mut Vec<(String, Vec<f64>)>| -> Result<Vec<EnsembleModel>> {
        let mut ensembles = Vec::with_capacity(cfg.ensembles.len());
        for &kind in &cfg.ensembles {
            let model = match kind.loss() {
                None => EnsembleModel::Linear(fit_linear_ensemble(sets, targets, cfg.ridge)?),
                Some(loss) => {
                    info!("{phase}: ensemble_{kind} on {} dates", sets.len());
                    let init = ensembles.iter().find_map(|m| match m {
                        EnsembleModel::CnnMae(m) if loss == LossKind::Ssim && cfg.ssim_from_mae => Some(m.clone()),
                        _ => None,
                    });
                    let out = fit_cnn_ensemble(
                        sets,
                        targets,
                        &cfg.ensembler_spec(),
                        &cfg.ensemble_training.config(loss, seeds.ensemble_shuffle, cfg.ssim),
                        seeds.ensemble_init,
                        init,
                    )?;
                    histories.push((format!("ensemble_{kind}"), out.history));
                    if loss == LossKind::Mae {
                        EnsembleModel::CnnMae(out.model)
                    } else {
                        EnsembleModel::CnnSsim(out.model)
                    }
                }
            };
            ensembles.push(model);
        }
        Ok(ensembles)
    };
    let mut candidate_histories = Vec::new();
    let candidates = fit_all(&sets[..fit_n], &targets[..fit_n], &mut candidate_histories).map_err(|e| e.in_phase(phase))?;
    let selection = select_ensemble(&candidates, val_sets, val_targets, &cfg.ssim, cfg.selection)
        .map_err(|e| e.in_phase(phase))?;
    info!("{phase}: selected ensemble_{}", candidates[selection.best].kind());
    // The final ensemblers see every ensemble date, held-out ones included.
    let ensembles = if held > 0 {
        drop(candidates);
        fit_all(&sets, &targets, &mut histories).map_err(|e| e.in_phase(phase))?
    } else {
        histories.extend(candidate_histories);
        candidates
    };
    drop(sets);
    drop(targets);

    // Phase 3: fine-tune the single models on the retrain years.
    let phase = "retraining";
    let pairs = make_training_pairs(&split.retrain, k, WEEKS_PER_YEAR, cfg.pair_stride).map_err(|e| e.in_phase(phase))?;
    let mut retrained = Vec::with_capacity(2);
    for (model, (loss, shuffle)) in singles
        .into_iter()
        .zip([(LossKind::Mae, seeds.retrain_mae), (LossKind::Ssim, seeds.retrain_ssim)])
    {
        info!("{phase}: cnn_{loss} on {} pairs", pairs.len());
        let out = train_pairs(model, &pairs, &cfg.retraining.config(loss, shuffle, cfg.ssim), &mask)
            .map_err(|e| e.in_phase(phase))?;
        histories.push((format!("cnn_{loss}_retrain"), out.history));
        retrained.push(out.model);
    }
    let cnn_ssim = retrained.pop().expect("two models");
    let cnn_mae = retrained.pop().expect("two models");

    Ok(TrainedSystem {
        cnn_mae,
        cnn_ssim,
        ensembles,
        selected: selection.best,
        selection_report: selection.report,
        histories,
    })
}

/// Every forecast source for one issue date: the three members, each
/// ensembler as `ensemble_<kind>`, and the selected one as `surrogate`.
pub fn forecast_sources(system: &TrainedSystem, series: &FieldSeries, issue_date: NaiveDate) -> Result<Vec<(String, ForecastBundle)>> {
    let set = member_forecasts(&system.cnn_mae, &system.cnn_ssim, series, issue_date)?;
    let mut out = Vec::with_capacity(MEMBERS + system.ensembles.len() + 1);
    for (i, model) in system.ensembles.iter().enumerate() {
        let b = ensemble_predict(model, &set)?;
        if i == system.selected {
            let mut s = b.clone();
            s.provenance = "surrogate".into();
            out.push(("surrogate".to_string(), s));
        }
        out.push((format!("ensemble_{}", model.kind()), b));
    }
    let MemberSet {
        cnn_mae,
        cnn_ssim,
        climatology,
    } = set;
    out.splice(0..0, [("cnn_mae".to_string(), cnn_mae), ("cnn_ssim".to_string(), cnn_ssim), ("climatology".to_string(), climatology)]);
    Ok(out)
}
