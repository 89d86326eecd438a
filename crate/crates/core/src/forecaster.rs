//! The five-layer convolutional forecaster: `k` weeks of history in, 52
//! weekly forecast channels out, at the input's spatial resolution.
//!
//! ReLU follows layers 1-4; the last layer is linear and predictions are
//! clipped to `[0, 1]`. Training optimises the unclipped output so the loss
//! gradient never vanishes on out-of-range predictions.

use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::ForecastBundle;
use crate::conv::{conv2d_backward_into, conv2d_forward, ConvGrads, ConvLayer, ConvShape};
use crate::error::{Error, Result};
use crate::grid::{global_week, FieldSeries, WEEKS_PER_YEAR};
use crate::metrics::{LossKind, SsimParams};
use crate::optim::{AdamConfig, OptimizerState};
use crate::tensor::{clip01, relu, relu_backward, Real, Tensor3};
use crate::windowing::TrainingPair;

pub const LAYERS: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_channels: usize,
    /// Output channels of each layer; the last must be 52.
    pub widths: Vec<usize>,
    /// Odd square kernel size of each layer.
    pub kernels: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_channels: 2 * WEEKS_PER_YEAR,
            widths: vec![64, 64, 64, 64, WEEKS_PER_YEAR],
            kernels: vec![5; LAYERS],
        }
    }
}

impl ModelSpec {
    pub fn new(input_channels: usize, hidden: usize, kernel: usize) -> Self {
        Self {
            input_channels,
            widths: vec![hidden, hidden, hidden, hidden, WEEKS_PER_YEAR],
            kernels: vec![kernel; LAYERS],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != LAYERS || self.kernels.len() != LAYERS {
            return Err(Error::Config(format!(
                "model needs exactly {LAYERS} layers, got {} widths / {} kernels",
                self.widths.len(),
                self.kernels.len()
            )));
        }
        if self.widths[LAYERS - 1] != WEEKS_PER_YEAR {
            return Err(Error::Config(format!(
                "final layer must have {WEEKS_PER_YEAR} channels, got {}",
                self.widths[LAYERS - 1]
            )));
        }
        if self.input_channels == 0 || self.widths.contains(&0) {
            return Err(Error::Config("zero-width layer".into()));
        }
        if let Some(k) = self.kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::EvenKernel(*k, *k));
        }
        Ok(())
    }

    pub fn layer_shapes(&self) -> Vec<ConvShape> {
        let mut cin = self.input_channels;
        self.widths
            .iter()
            .zip(&self.kernels)
            .map(|(&cout, &k)| {
                let s = ConvShape {
                    in_channels: cin,
                    out_channels: cout,
                    kernel_h: k,
                    kernel_w: k,
                };
                cin = cout;
                s
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(ConvShape::param_count).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T = f32> {
    pub spec: ModelSpec,
    pub layers: Vec<ConvLayer<T>>,
}

pub fn build_model<T: Real>(spec: &ModelSpec, seed: u64) -> Result<ModelState<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layer_shapes()
        .into_iter()
        .map(|s| ConvLayer::glorot(s, &mut rng))
        .collect::<Result<_>>()?;
    Ok(ModelState {
        spec: spec.clone(),
        layers,
    })
}

/// Activations kept for the backward pass: the input of every layer plus the
/// final unclipped output.
struct ForwardTrace<T> {
    inputs: Vec<Tensor3<T>>,
    output: Tensor3<T>,
}

impl<T: Real> ModelState<T> {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.shape().param_count()).sum()
    }

    fn check_input(&self, input: &Tensor3<T>) -> Result<()> {
        if input.channels() != self.spec.input_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {}",
                self.spec.input_channels,
                input.channels()
            )));
        }
        Ok(())
    }

    fn trace(&self, input: &Tensor3<T>) -> Result<ForwardTrace<T>> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(LAYERS);
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = conv2d_forward(&x, layer)?;
            inputs.push(x);
            x = if i + 1 < self.layers.len() { relu(&y) } else { y };
        }
        Ok(ForwardTrace { inputs, output: x })
    }

    /// Final-layer output before clipping.
    pub fn forward_raw(&self, input: &Tensor3<T>) -> Result<Tensor3<T>> {
        self.check_input(input)?;
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = conv2d_forward(&x, layer)?;
            x = if i + 1 < self.layers.len() { relu(&y) } else { y };
        }
        Ok(x)
    }

    /// Forward pass followed by clipping to `[0, 1]`.
    pub fn predict(&self, input: &Tensor3<T>) -> Result<Tensor3<T>> {
        Ok(clip01(&self.forward_raw(input)?))
    }

    /// Accumulates parameter gradients for `d loss / d output = grad_out`.
    fn backward(&self, trace: &ForwardTrace<T>, grad_out: Tensor3<T>, grads: &mut [ConvGrads<T>]) -> Result<()> {
        let mut g = grad_out;
        for i in (0..self.layers.len()).rev() {
            let gi = conv2d_backward_into(&trace.inputs[i], &self.layers[i], &g, &mut grads[i], i > 0)?;
            if let Some(mut gi) = gi {
                // inputs[i] is the ReLU output of layer i-1.
                relu_backward(&trace.inputs[i], &mut gi);
                g = gi;
            }
        }
        Ok(())
    }

    /// Loss of the clipped prediction on one sample and its parameter
    /// gradients. A clipped output only receives gradient that moves it back
    /// towards `[0, 1]`.
    pub fn loss_and_grads(
        &self,
        input: &Tensor3<T>,
        target: &Tensor3<T>,
        mask: &[bool],
        loss: LossKind,
        ssim: &SsimParams,
    ) -> Result<(f64, Vec<ConvGrads<T>>)> {
        let trace = self.trace(input)?;
        let (value, mut grad_out) = loss.value_and_grad(&clip01(&trace.output), target, mask, ssim)?;
        for (g, &y) in grad_out.as_mut_slice().iter_mut().zip(trace.output.as_slice()) {
            if (y < T::zero() && *g > T::zero()) || (y > T::one() && *g < T::zero()) {
                *g = T::zero();
            }
        }
        let mut grads: Vec<_> = self.layers.iter().map(|l| l.zero_grads()).collect();
        self.backward(&trace, grad_out, &mut grads)?;
        Ok((value, grads))
    }
}

impl ModelState<f32> {
    /// Forecast issued on `issue_date` from the preceding `k` weekly frames.
    pub fn forecast(&self, series: &FieldSeries, issue_date: NaiveDate, provenance: &str) -> Result<ForecastBundle> {
        let input = history_input(series, issue_date, self.spec.input_channels)?;
        let values = self.predict(&input)?;
        ForecastBundle::new(issue_date, values, series.geometry(), series.mask().to_vec(), provenance)
    }
}

/// The `k` weekly frames immediately before `issue_date`, oldest first.
pub fn history_input(series: &FieldSeries, issue_date: NaiveDate, k: usize) -> Result<Tensor3<f32>> {
    let issue = global_week(issue_date)
        .ok_or_else(|| Error::Misaligned(format!("{issue_date} does not start a calendar week")))?;
    let first = series
        .timestamps()
        .first()
        .and_then(|&d| global_week(d))
        .ok_or_else(|| Error::InsufficientHistory("empty or non-weekly series".into()))?;
    let end = issue - first;
    if end < k as i64 || end > series.len() as i64 {
        return Err(Error::InsufficientHistory(format!(
            "issue {issue_date} needs {k} weeks of history inside the series"
        )));
    }
    let end = end as usize;
    Ok(series.tensor(end - k..end))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many epochs without improvement; 0 disables.
    pub patience: usize,
    #[serde(default)]
    pub ssim: SsimParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Mae,
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 4,
            seed: 0,
            patience: 0,
            ssim: SsimParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.ssim.validate()
    }
}

/// A borrowed training example.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a, T> {
    pub input: &'a Tensor3<T>,
    pub target: &'a Tensor3<T>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T = f32> {
    /// Parameters at the start of the epoch with the lowest mean loss.
    pub model: ModelState<T>,
    /// Mean training loss of every epoch run.
    pub history: Vec<f64>,
    pub best_epoch: Option<usize>,
}

pub fn train<T: Real>(
    model: ModelState<T>,
    samples: &[Sample<'_, T>],
    cfg: &TrainConfig,
    mask: &[bool],
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            history: Vec::new(),
            best_epoch: None,
        });
    }
    if samples.is_empty() {
        return Err(Error::Empty("no training samples".into()));
    }

    let mut model = model;
    let group_sizes: Vec<usize> = model
        .layers
        .iter()
        .flat_map(|l| [l.weights.len(), l.bias.len()])
        .collect();
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut opt = OptimizerState::<T>::new(adam, &group_sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelState<T>)> = None;
    let mut since_best = 0;

    for epoch in 0..cfg.epochs {
        let snapshot = model.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads: Vec<_> = model.layers.iter().map(|l| l.zero_grads()).collect();
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = samples[i];
                let (v, g) = model.loss_and_grads(s.input, s.target, mask, cfg.loss, &cfg.ssim)?;
                batch_loss += v;
                for (acc, g) in grads.iter_mut().zip(g) {
                    for (a, v) in acc.weights.iter_mut().zip(g.weights) {
                        *a = *a + v;
                    }
                    for (a, v) in acc.bias.iter_mut().zip(g.bias) {
                        *a = *a + v;
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            epoch_loss += batch_loss;
            let inv = T::from_f64c(1.0 / batch.len() as f64);
            for g in &mut grads {
                g.weights.iter_mut().chain(g.bias.iter_mut()).for_each(|v| *v = *v * inv);
            }
            let mut params: Vec<&mut [T]> = model
                .layers
                .iter_mut()
                .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
                .collect();
            let grad_refs: Vec<&[T]> = grads
                .iter()
                .flat_map(|g| [g.weights.as_slice(), g.bias.as_slice()])
                .collect();
            opt.step(&mut params, &grad_refs)
                .map_err(|e| match e {
                    Error::NonFiniteGradient { .. } => Error::NonFiniteLoss { epoch, batch: b },
                    other => other,
                })?;
        }
        let mean = epoch_loss / samples.len() as f64;
        history.push(mean);
        if best.as_ref().is_none_or(|(l, _, _)| mean < *l) {
            best = Some((mean, epoch, snapshot));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model: best_model,
        history,
        best_epoch: Some(best_epoch),
    })
}

/// Trains on lagged pairs built by [`crate::windowing::make_training_pairs`].
pub fn train_pairs(
    model: ModelState<f32>,
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
    mask: &[bool],
) -> Result<TrainOutcome<f32>> {
    for p in pairs {
        if p.input.channels() != model.spec.input_channels || p.target.channels() != WEEKS_PER_YEAR {
            return Err(Error::Shape(format!(
                "pair {} -> {} does not fit model {} -> {WEEKS_PER_YEAR}",
                p.input.shape(),
                p.target.shape(),
                model.spec.input_channels
            )));
        }
    }
    let samples: Vec<Sample<'_, f32>> = pairs
        .iter()
        .map(|p| Sample {
            input: &p.input,
            target: &p.target,
        })
        .collect();
    train(model, &samples, cfg, mask)
}

const CHECKPOINT_MAGIC: &str = "SEAICE-CNN";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    magic: String,
    version: u32,
    spec: ModelSpec,
    param_count: usize,
    params_file: String,
}

/// Writes `<path>` (JSON header) and `<stem>.params.bin` (f32 LE, per layer
/// weights then bias).
pub fn save_checkpoint(model: &ModelState<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    let params_file = format!("{stem}.params.bin");
    let header = CheckpointHeader {
        magic: CHECKPOINT_MAGIC.into(),
        version: CHECKPOINT_VERSION,
        spec: model.spec.clone(),
        param_count: model.param_count(),
        params_file: params_file.clone(),
    };
    let mut payload = Vec::with_capacity(model.param_count() * 4);
    for l in &model.layers {
        for v in l.weights.iter().chain(&l.bias) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_string_pretty(&header).map_err(|e| Error::json(path, e))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    let bin = path.with_file_name(params_file);
    fs::write(&bin, payload).map_err(|e| Error::io(&bin, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState<f32>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if header.magic != CHECKPOINT_MAGIC || header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{} is not a version-{CHECKPOINT_VERSION} model checkpoint",
            path.display()
        )));
    }
    header.spec.validate()?;
    let bin = path.with_file_name(&header.params_file);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let expected = header.spec.param_count() * 4;
    if bytes.len() != expected || header.param_count * 4 != expected {
        return Err(Error::PayloadSize {
            path: bin,
            expected,
            found: bytes.len(),
        });
    }
    let mut values = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    let layers = header
        .spec
        .layer_shapes()
        .into_iter()
        .map(|s| {
            let w = values.by_ref().take(s.weight_len()).collect();
            let b = values.by_ref().take(s.out_channels).collect();
            ConvLayer::new(s, w, b)
        })
        .collect::<Result<_>>()?;
    Ok(ModelState {
        spec: header.spec,
        layers,
    })
}
