//! Synthetic weekly concentration series with a seasonally migrating ice edge.
//!
//! Ice covers the top of the grid. The edge row follows an annual cosine
//! (maximum extent in week 0), a slow linear retreat, a persistent
//! interannual anomaly and a gentle along-edge wave. Concentration falls off
//! logistically across the edge, and independent per-cell noise is added
//! before clamping to `[0, 1]`. A rectangular land block in the bottom-left
//! corner exercises the mask.

use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{weekly_calendar, Cadence, FieldSeries, GridGeometry, DEFAULT_CELL_SIZE_KM, WEEKS_PER_YEAR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub years: usize,
    pub start_year: i32,
    pub cell_size_km: f64,
    /// Mean edge row as a fraction of the grid height.
    pub edge_mean: f64,
    /// Half the annual swing of the edge, fraction of height.
    pub seasonal_amplitude: f64,
    /// Width of the concentration transition, in cells.
    pub edge_softness: f64,
    /// Edge retreat per year, fraction of height.
    pub trend_per_year: f64,
    /// Stationary std. dev. of the interannual edge anomaly, fraction of height.
    pub anomaly_std: f64,
    /// Year-to-year autocorrelation of the anomaly.
    pub anomaly_persistence: f64,
    /// Amplitude of the along-edge wave, fraction of height.
    pub wave_amplitude: f64,
    /// Std. dev. of per-cell noise.
    pub noise_std: f64,
    /// Fraction of each side covered by the land block (0 disables it).
    pub land_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            years: 10,
            start_year: 2013,
            cell_size_km: DEFAULT_CELL_SIZE_KM,
            edge_mean: 0.5,
            seasonal_amplitude: 0.3,
            edge_softness: 1.5,
            trend_per_year: 0.03,
            anomaly_std: 0.02,
            anomaly_persistence: 0.6,
            wave_amplitude: 0.08,
            noise_std: 0.02,
            land_fraction: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return bad(format!("grid size {}x{}", self.height, self.width));
        }
        if self.years == 0 {
            return bad("years must be positive".into());
        }
        if !(self.edge_softness > 0.0) {
            return bad(format!("edge_softness {}", self.edge_softness));
        }
        if !(self.noise_std >= 0.0) || !(self.anomaly_std >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.anomaly_persistence) {
            return bad(format!("anomaly_persistence {} outside [0, 1)", self.anomaly_persistence));
        }
        if !(0.0..0.5).contains(&self.land_fraction) {
            return bad(format!("land_fraction {} outside [0, 0.5)", self.land_fraction));
        }
        for v in [self.edge_mean, self.seasonal_amplitude, self.trend_per_year, self.wave_amplitude, self.cell_size_km] {
            if !v.is_finite() {
                return bad("non-finite parameter".into());
            }
        }
        GridGeometry::new(self.height, self.width, self.cell_size_km)?;
        Ok(())
    }

    fn land_mask(&self) -> Vec<bool> {
        let lh = (self.height as f64 * self.land_fraction).round() as usize;
        let lw = (self.width as f64 * self.land_fraction).round() as usize;
        let mut mask = vec![true; self.height * self.width];
        for r in self.height - lh..self.height {
            for c in 0..lw {
                mask[r * self.width + c] = false;
            }
        }
        mask
    }
}

pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<FieldSeries> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (config.height, config.width);
    let hf = h as f64;

    // One anomaly per year boundary, linearly interpolated through the year.
    let rho = config.anomaly_persistence;
    let innovation = Normal::new(0.0, (1.0 - rho * rho).sqrt()).expect("valid normal");
    let mut anomalies = Vec::with_capacity(config.years + 1);
    let mut a = if config.anomaly_std > 0.0 {
        Normal::new(0.0, 1.0).expect("valid normal").sample(&mut rng)
    } else {
        0.0
    };
    for _ in 0..=config.years {
        anomalies.push(a * config.anomaly_std);
        if config.anomaly_std > 0.0 {
            a = rho * a + innovation.sample(&mut rng);
        }
    }

    let noise = (config.noise_std > 0.0).then(|| Normal::new(0.0, config.noise_std).expect("valid normal"));
    let mask = config.land_mask();
    let calendar = weekly_calendar(config.start_year, config.years);
    let mut frames = Vec::with_capacity(calendar.len());
    for t in 0..calendar.len() {
        let year = t / WEEKS_PER_YEAR;
        let week = t % WEEKS_PER_YEAR;
        let phase = TAU * week as f64 / WEEKS_PER_YEAR as f64;
        let frac = week as f64 / WEEKS_PER_YEAR as f64;
        let anomaly = anomalies[year] * (1.0 - frac) + anomalies[year + 1] * frac;
        let edge_base = config.edge_mean + config.seasonal_amplitude * phase.cos()
            - config.trend_per_year * (t as f64 / WEEKS_PER_YEAR as f64)
            + anomaly;
        let mut frame = vec![0.0f32; h * w];
        for c in 0..w {
            let wave = config.wave_amplitude * (TAU * (c as f64 + 0.5) / w as f64 + 0.5 * phase).sin();
            let edge_row = (edge_base + wave) * hf;
            for r in 0..h {
                let i = r * w + c;
                if !mask[i] {
                    continue;
                }
                let mut v = 1.0 / (1.0 + ((r as f64 + 0.5 - edge_row) / config.edge_softness).exp());
                if let Some(n) = &noise {
                    v += n.sample(&mut rng);
                }
                frame[i] = v.clamp(0.0, 1.0) as f32;
            }
        }
        frames.push(frame);
    }
    let geometry = GridGeometry::new(h, w, config.cell_size_km)?;
    FieldSeries::new(geometry, mask, frames, calendar, Cadence::Weekly)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SynthConfig {
        SynthConfig {
            noise_std: 0.0,
            trend_per_year: 0.0,
            anomaly_std: 0.0,
            years: 3,
            height: 16,
            width: 12,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn quiet_series_is_periodic() {
        let s = synth_generate(&quiet(), 1).unwrap();
        for t in 0..52 {
            assert_eq!(s.frame(t), s.frame(t + 52));
            assert_eq!(s.frame(t), s.frame(t + 104));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig { years: 2, ..SynthConfig::default() };
        assert_eq!(synth_generate(&cfg, 7).unwrap(), synth_generate(&cfg, 7).unwrap());
        assert_ne!(synth_generate(&cfg, 7).unwrap(), synth_generate(&cfg, 8).unwrap());
    }

    #[test]
    fn bounds_mask_and_seasonality() {
        let s = synth_generate(&SynthConfig { years: 2, ..SynthConfig::default() }, 3).unwrap();
        assert_eq!(s.len(), 104);
        assert!(s.mask().iter().any(|&m| !m));
        for f in s.frames() {
            for (v, &m) in f.iter().zip(s.mask()) {
                assert!((0.0..=1.0).contains(v));
                if !m {
                    assert_eq!(*v, 0.0);
                }
            }
        }
        let extent = |t: usize| s.frame(t).iter().sum::<f32>();
        assert!(extent(0) > extent(26) + 50.0, "winter extent should exceed summer");
    }

    #[test]
    fn invalid_configs() {
        assert!(synth_generate(&SynthConfig { height: 0, ..SynthConfig::default() }, 0).is_err());
        assert!(synth_generate(&SynthConfig { years: 0, ..SynthConfig::default() }, 0).is_err());
        assert!(synth_generate(&SynthConfig { edge_softness: 0.0, ..SynthConfig::default() }, 0).is_err());
    }
}
