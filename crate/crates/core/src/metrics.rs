//! Masked MAE and windowed SSIM, used both as training objectives and as
//! evaluation metrics, plus per-period aggregation.
//!
//! The mask is a single `H × W` plane shared by every channel; `true` marks
//! a cell that counts. SSIM only visits windows that lie entirely on valid
//! cells, so values stored on masked cells never influence either metric.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::bundle::ForecastBundle;
use crate::error::{Error, Result};
use crate::grid::{week_of_year, FieldSeries};
use crate::tensor::{Real, Shape3, Tensor3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Window {
    Uniform,
    Gaussian { sigma: f64 },
}

/// SSIM settings. `c1 = (0.01 L)^2`, `c2 = (0.03 L)^2` for dynamic range `L`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window_size: usize,
    pub window: Window,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self::for_range(1.0, 11, Window::Gaussian { sigma: 1.5 })
    }
}

impl SsimParams {
    pub fn for_range(value_range: f64, window_size: usize, window: Window) -> Self {
        Self {
            window_size,
            window,
            c1: (0.01 * value_range).powi(2),
            c2: (0.03 * value_range).powi(2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.window_size % 2 == 0 {
            return Err(Error::Config(format!("SSIM window size {} must be odd", self.window_size)));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::Config("SSIM constants must be positive".into()));
        }
        if let Window::Gaussian { sigma } = self.window {
            if !(sigma > 0.0) {
                return Err(Error::Config(format!("gaussian sigma {sigma}")));
            }
        }
        Ok(())
    }

    /// Normalised 1D window profile; the 2D window is its outer product.
    pub fn profile(&self) -> Vec<f64> {
        let n = self.window_size;
        let raw: Vec<f64> = match self.window {
            Window::Uniform => vec![1.0; n],
            Window::Gaussian { sigma } => {
                let half = (n / 2) as f64;
                (0..n)
                    .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
                    .collect()
            }
        };
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }

    /// Normalised `size × size` window weights, row-major.
    pub fn weights(&self) -> Vec<f64> {
        let g = self.profile();
        let n = g.len();
        (0..n * n).map(|k| g[k / n] * g[k % n]).collect()
    }
}

fn check_inputs<T: Real>(pred: &Tensor3<T>, target: &Tensor3<T>, mask: &[bool]) -> Result<()> {
    pred.check_same_shape(target, "prediction vs target")?;
    if mask.len() != pred.shape().plane() {
        return Err(Error::Shape(format!(
            "mask has {} cells, images are {}x{}",
            mask.len(),
            pred.height(),
            pred.width()
        )));
    }
    Ok(())
}

/// Mean absolute error over valid cells of every channel.
pub fn mae<T: Real>(pred: &Tensor3<T>, target: &Tensor3<T>, mask: &[bool]) -> Result<f64> {
    mae_with_grad(pred, target, mask, false).map(|(v, _)| v)
}

/// MAE and, on request, its (sub)gradient with respect to `pred`.
pub fn mae_with_grad<T: Real>(
    pred: &Tensor3<T>,
    target: &Tensor3<T>,
    mask: &[bool],
    want_grad: bool,
) -> Result<(f64, Option<Tensor3<T>>)> {
    check_inputs(pred, target, mask)?;
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(Error::Empty("mask has no valid cells".into()));
    }
    let plane = pred.shape().plane();
    let n = (valid * pred.channels()) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Tensor3::zeros(pred.shape()));
    let inv = T::from_f64c(1.0 / n);
    for (i, (&p, &t)) in pred.as_slice().iter().zip(target.as_slice()).enumerate() {
        if !mask[i % plane] {
            continue;
        }
        let d = p - t;
        total += d.abs().to_f64c();
        if let Some(g) = grad.as_mut() {
            let s = if d > T::zero() {
                inv
            } else if d < T::zero() {
                -inv
            } else {
                T::zero()
            };
            g.as_mut_slice()[i] = s;
        }
    }
    Ok((total / n, grad))
}

/// Top-left corners of the windows that lie fully on valid cells.
fn valid_windows(mask: &[bool], h: usize, w: usize, size: usize) -> Vec<(usize, usize)> {
    // 2D prefix sum of invalid cells.
    let mut bad = vec![0usize; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            bad[(y + 1) * (w + 1) + x + 1] = bad[y * (w + 1) + x + 1] + bad[(y + 1) * (w + 1) + x]
                - bad[y * (w + 1) + x]
                + usize::from(!mask[y * w + x]);
        }
    }
    let count = |y0: usize, x0: usize| {
        let (y1, x1) = (y0 + size, x0 + size);
        bad[y1 * (w + 1) + x1] + bad[y0 * (w + 1) + x0] - bad[y0 * (w + 1) + x1] - bad[y1 * (w + 1) + x0]
    };
    let mut out = Vec::new();
    for y in 0..=h - size {
        for x in 0..=w - size {
            if count(y, x) == 0 {
                out.push((y, x));
            }
        }
    }
    out
}

/// Mean SSIM over channels; each channel is the mean over valid windows.
pub fn ssim<T: Real>(pred: &Tensor3<T>, target: &Tensor3<T>, mask: &[bool], params: &SsimParams) -> Result<f64> {
    ssim_with_grad(pred, target, mask, params, false).map(|(v, _)| v)
}

/// `1 - ssim`, the training objective.
pub fn ssim_loss<T: Real>(pred: &Tensor3<T>, target: &Tensor3<T>, mask: &[bool], params: &SsimParams) -> Result<f64> {
    ssim(pred, target, mask, params).map(|s| 1.0 - s)
}

/// SSIM and, on request, its gradient with respect to `pred`.
pub fn ssim_with_grad<T: Real>(
    pred: &Tensor3<T>,
    target: &Tensor3<T>,
    mask: &[bool],
    params: &SsimParams,
    want_grad: bool,
) -> Result<(f64, Option<Tensor3<T>>)> {
    check_inputs(pred, target, mask)?;
    params.validate()?;
    let Shape3 { channels, height: h, width: w } = pred.shape();
    let n = params.window_size;
    if h < n || w < n {
        return Err(Error::Shape(format!("image {h}x{w} smaller than SSIM window {n}")));
    }
    let windows = valid_windows(mask, h, w, n);
    if windows.is_empty() {
        return Err(Error::Empty("no SSIM window lies fully on valid cells".into()));
    }
    let g = params.profile();
    let (c1, c2) = (params.c1, params.c2);
    let scale = 1.0 / (windows.len() * channels) as f64;
    let (oh, ow) = (h - n + 1, w - n + 1);
    let filter = SeparableFilter { g: &g, h, w };

    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0f64; pred.shape().len()]);
    let mut xs = vec![0.0f64; h * w];
    let mut ys = vec![0.0f64; h * w];
    let mut prod = vec![0.0f64; h * w];
    let mut scratch = vec![0.0f64; h * ow];
    let mut stats: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0f64; oh * ow]);
    let mut coef: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0f64; oh * ow]);
    let mut back = vec![0.0f64; h * w];
    for c in 0..channels {
        for (d, s) in xs.iter_mut().zip(pred.channel(c)) {
            *d = s.to_f64c();
        }
        for (d, s) in ys.iter_mut().zip(target.channel(c)) {
            *d = s.to_f64c();
        }
        filter.apply(&xs, &mut scratch, &mut stats[0]);
        filter.apply(&ys, &mut scratch, &mut stats[1]);
        for (p, (&a, _)) in prod.iter_mut().zip(xs.iter().zip(&ys)) {
            *p = a * a;
        }
        filter.apply(&prod, &mut scratch, &mut stats[2]);
        for (p, &b) in prod.iter_mut().zip(&ys) {
            *p = b * b;
        }
        filter.apply(&prod, &mut scratch, &mut stats[3]);
        for (p, (&a, &b)) in prod.iter_mut().zip(xs.iter().zip(&ys)) {
            *p = a * b;
        }
        filter.apply(&prod, &mut scratch, &mut stats[4]);

        for cf in coef.iter_mut() {
            cf.fill(0.0);
        }
        for &(y0, x0) in &windows {
            let i = y0 * ow + x0;
            let (mx, my, exx, eyy, exy) = (stats[0][i], stats[1][i], stats[2][i], stats[3][i], stats[4][i]);
            let a1 = 2.0 * mx * my + c1;
            let a2 = 2.0 * (exy - mx * my) + c2;
            let b1 = mx * mx + my * my + c1;
            let b2 = (exx - mx * mx) + (eyy - my * my) + c2;
            let num = a1 * a2;
            let den = b1 * b2;
            total += num / den;

            if grad.is_some() {
                // Partials of num/den with respect to mean(x), E[x^2], E[xy].
                let d_num_mx = 2.0 * my * a2 - 2.0 * my * a1;
                let d_den_mx = 2.0 * mx * b2 - 2.0 * mx * b1;
                let den2 = den * den;
                coef[0][i] = (d_num_mx * den - num * d_den_mx) / den2 * scale;
                coef[1][i] = -num * b1 / den2 * scale;
                coef[2][i] = 2.0 * a1 / den * scale;
            }
        }
        if let Some(gr) = grad.as_mut() {
            let gc = &mut gr[c * h * w..(c + 1) * h * w];
            filter.adjoint(&coef[0], &mut scratch, &mut back);
            gc.copy_from_slice(&back);
            filter.adjoint(&coef[1], &mut scratch, &mut back);
            for ((d, &b), &x) in gc.iter_mut().zip(&back).zip(&xs) {
                *d += 2.0 * x * b;
            }
            filter.adjoint(&coef[2], &mut scratch, &mut back);
            for ((d, &b), &y) in gc.iter_mut().zip(&back).zip(&ys) {
                *d += y * b;
            }
        }
    }
    let grad = grad.map(|g| {
        Tensor3::from_vec(pred.shape(), g.into_iter().map(T::from_f64c).collect()).expect("finite gradient")
    });
    Ok((total * scale, grad))
}

/// Windowed weighted sums at every fully-inside window position, computed as
/// a row pass followed by a column pass.
struct SeparableFilter<'a> {
    g: &'a [f64],
    h: usize,
    w: usize,
}

impl SeparableFilter<'_> {
    /// `out[y0, x0] = Σ g[dy] g[dx] src[y0+dy, x0+dx]`, `out` is `(h-n+1)×(w-n+1)`.
    fn apply(&self, src: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        let (n, h, w) = (self.g.len(), self.h, self.w);
        let ow = w - n + 1;
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for x0 in 0..ow {
                scratch[y * ow + x0] = self.g.iter().zip(&row[x0..x0 + n]).map(|(a, b)| a * b).sum();
            }
        }
        for y0 in 0..h - n + 1 {
            let dst = &mut out[y0 * ow..(y0 + 1) * ow];
            dst.fill(0.0);
            for (dy, &k) in self.g.iter().enumerate() {
                for (d, &v) in dst.iter_mut().zip(&scratch[(y0 + dy) * ow..(y0 + dy + 1) * ow]) {
                    *d += k * v;
                }
            }
        }
    }

    /// Transpose of [`Self::apply`]: spreads each window value back over its cells.
    fn adjoint(&self, src: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        let (n, h, w) = (self.g.len(), self.h, self.w);
        let ow = w - n + 1;
        scratch[..h * ow].fill(0.0);
        for y0 in 0..h - n + 1 {
            let s = &src[y0 * ow..(y0 + 1) * ow];
            for (dy, &k) in self.g.iter().enumerate() {
                for (d, &v) in scratch[(y0 + dy) * ow..(y0 + dy + 1) * ow].iter_mut().zip(s) {
                    *d += k * v;
                }
            }
        }
        out.fill(0.0);
        for y in 0..h {
            let dst = &mut out[y * w..(y + 1) * w];
            for x0 in 0..ow {
                let v = scratch[y * ow + x0];
                if v == 0.0 {
                    continue;
                }
                for (d, &k) in dst[x0..x0 + n].iter_mut().zip(self.g) {
                    *d += k * v;
                }
            }
        }
    }
}

/// Training objective selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mae,
    Ssim,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Mae => "mae",
            LossKind::Ssim => "ssim",
        }
    }

    /// Loss value and gradient with respect to `pred`.
    pub fn value_and_grad<T: Real>(
        &self,
        pred: &Tensor3<T>,
        target: &Tensor3<T>,
        mask: &[bool],
        params: &SsimParams,
    ) -> Result<(f64, Tensor3<T>)> {
        match self {
            LossKind::Mae => {
                let (v, g) = mae_with_grad(pred, target, mask, true)?;
                Ok((v, g.expect("requested")))
            }
            LossKind::Ssim => {
                let (s, g) = ssim_with_grad(pred, target, mask, params, true)?;
                Ok((1.0 - s, g.expect("requested").map(|v| -v)))
            }
        }
    }

    pub fn value<T: Real>(&self, pred: &Tensor3<T>, target: &Tensor3<T>, mask: &[bool], params: &SsimParams) -> Result<f64> {
        match self {
            LossKind::Mae => mae(pred, target, mask),
            LossKind::Ssim => ssim_loss(pred, target, mask, params),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    Yearly,
    /// First three quarters of each year: weeks 1-13, 14-26 and 27-39.
    Quarterly,
}

impl std::str::FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "yearly" => Ok(Grouping::Yearly),
            "quarterly" => Ok(Grouping::Quarterly),
            other => Err(Error::Config(format!("unknown grouping {other:?}"))),
        }
    }
}

impl Grouping {
    pub const QUARTER_WEEKS: usize = 13;

    pub fn as_str(&self) -> &'static str {
        match self {
            Grouping::Yearly => "yearly",
            Grouping::Quarterly => "quarterly",
        }
    }

    fn label(&self, date: NaiveDate) -> Option<String> {
        match self {
            Grouping::Yearly => Some(date.year().to_string()),
            Grouping::Quarterly => {
                let q = week_of_year(date)? / Self::QUARTER_WEEKS;
                (q < 3).then(|| format!("{}Q{}", date.year(), q + 1))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub period: String,
    pub mae: f64,
    pub ssim: f64,
    /// Forecast steps aggregated into this row.
    pub steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn row(&self, period: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.period == period)
    }

    /// Mean of the row values, weighting every row equally.
    pub fn mean(&self) -> Option<(f64, f64)> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        Some((
            self.rows.iter().map(|r| r.mae).sum::<f64>() / n,
            self.rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        ))
    }

    /// CSV with columns `period,mae,ssim`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["period", "mae", "ssim"])?;
        for r in &self.rows {
            wtr.write_record([r.period.clone(), r.mae.to_string(), r.ssim.to_string()])?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Per-step metrics over `(date, frame)` pairs, grouped and averaged.
pub fn evaluate_steps<'a>(
    steps: impl IntoIterator<Item = (NaiveDate, &'a [f32])>,
    forecast_mask: &[bool],
    actuals: &FieldSeries,
    grouping: Grouping,
    params: &SsimParams,
) -> Result<MetricReport> {
    let g = actuals.geometry();
    if forecast_mask.len() != g.cells() {
        return Err(Error::Shape("forecast grid differs from actual grid".into()));
    }
    let mask: Vec<bool> = actuals.mask().iter().zip(forecast_mask).map(|(&a, &b)| a && b).collect();
    let shape = Shape3::new(1, g.height, g.width);
    let mut groups: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for (date, frame) in steps {
        let idx = actuals
            .index_of(date)
            .ok_or_else(|| Error::Misaligned(format!("no actual frame for forecast week {date}")))?;
        let Some(label) = grouping.label(date) else {
            continue;
        };
        let p = Tensor3::from_vec(shape, frame.to_vec())?;
        let a = Tensor3::from_vec(shape, actuals.frame(idx).to_vec())?;
        let entry = groups.entry(label).or_default();
        entry.0 += mae(&p, &a, &mask)?;
        entry.1 += ssim(&p, &a, &mask, params)?;
        entry.2 += 1;
    }
    Ok(MetricReport {
        rows: groups
            .into_iter()
            .map(|(period, (m, s, n))| MetricRow {
                period,
                mae: m / n as f64,
                ssim: s / n as f64,
                steps: n,
            })
            .collect(),
    })
}

pub fn evaluate(
    forecasts: &[ForecastBundle],
    actuals: &FieldSeries,
    grouping: Grouping,
    params: &SsimParams,
) -> Result<MetricReport> {
    let Some(first) = forecasts.first() else {
        return Ok(MetricReport::default());
    };
    if forecasts.iter().any(|b| b.mask != first.mask) {
        return Err(Error::Shape("forecast bundles disagree on the grid mask".into()));
    }
    let steps = forecasts
        .iter()
        .flat_map(|b| b.dates().into_iter().enumerate().map(move |(i, d)| (d, b.values.channel(i))));
    evaluate_steps(steps, &first.mask, actuals, grouping, params)
}

/// Same as [`evaluate`] for a forecast stored as a plain weekly series.
pub fn evaluate_series(
    forecast: &FieldSeries,
    actuals: &FieldSeries,
    grouping: Grouping,
    params: &SsimParams,
) -> Result<MetricReport> {
    let steps = forecast
        .timestamps()
        .iter()
        .zip(forecast.frames())
        .map(|(&d, f)| (d, f.as_slice()));
    evaluate_steps(steps, forecast.mask(), actuals, grouping, params)
}
