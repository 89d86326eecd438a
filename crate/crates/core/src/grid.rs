//! Gridded concentration fields and calendar-aware time series of them.
//!
//! Weekly series use a fixed 52-week year: week `w` of year `Y` starts on
//! day-of-year `1 + 7w`, and days 365/366 belong to no week. Every weekly
//! frame therefore has a global week index `52 * Y + w`, and a series is
//! contiguous exactly when those indices increase by one.

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape3, Tensor3};

pub const WEEKS_PER_YEAR: usize = 52;

/// Nominal cell size of the regular grid used for training data.
pub const DEFAULT_CELL_SIZE_KM: f64 = 14.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cadence {
    Daily,
    Weekly,
}

impl Cadence {
    pub fn as_str(&self) -> &'static str {
        match self {
            Cadence::Daily => "daily",
            Cadence::Weekly => "weekly",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub height: usize,
    pub width: usize,
    pub cell_size_km: f64,
}

impl GridGeometry {
    pub fn new(height: usize, width: usize, cell_size_km: f64) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Geometry(format!("empty grid {height}x{width}")));
        }
        if !(cell_size_km > 0.0) || !cell_size_km.is_finite() {
            return Err(Error::Geometry(format!("cell size {cell_size_km} km")));
        }
        Ok(Self {
            height,
            width,
            cell_size_km,
        })
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

/// Week-of-year (0-based) of a weekly timestamp, or `None` if the date does
/// not start one of the 52 weeks.
pub fn week_of_year(date: NaiveDate) -> Option<usize> {
    let ord = date.ordinal() as usize;
    (ord <= 7 * WEEKS_PER_YEAR && (ord - 1) % 7 == 0).then(|| (ord - 1) / 7)
}

pub fn global_week(date: NaiveDate) -> Option<i64> {
    week_of_year(date).map(|w| date.year() as i64 * WEEKS_PER_YEAR as i64 + w as i64)
}

/// Start date of a global week index.
pub fn week_start(global: i64) -> NaiveDate {
    let year = global.div_euclid(WEEKS_PER_YEAR as i64) as i32;
    let week = global.rem_euclid(WEEKS_PER_YEAR as i64) as u32;
    NaiveDate::from_yo_opt(year, 1 + 7 * week).expect("valid week start")
}

/// Weekly timestamps for `years` whole years starting on January 1 of `start_year`.
pub fn weekly_calendar(start_year: i32, years: usize) -> Vec<NaiveDate> {
    let first = start_year as i64 * WEEKS_PER_YEAR as i64;
    (0..(years * WEEKS_PER_YEAR) as i64)
        .map(|i| week_start(first + i))
        .collect()
}

/// Daily timestamps for `days` consecutive days from `start`.
pub fn daily_calendar(start: NaiveDate, days: usize) -> Vec<NaiveDate> {
    (0..days as i64).map(|d| start + Duration::days(d)).collect()
}

/// A single concentration raster with its validity mask (`true` = water).
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub geometry: GridGeometry,
    pub values: Vec<f32>,
    pub mask: Vec<bool>,
}

impl GridField {
    pub fn new(geometry: GridGeometry, values: Vec<f32>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != geometry.cells() || mask.len() != geometry.cells() {
            return Err(Error::Shape(format!(
                "field {}x{} with {} values and {} mask cells",
                geometry.height,
                geometry.width,
                values.len(),
                mask.len()
            )));
        }
        let mut values = values;
        validate_frame(0, &geometry, &mut values, &mask)?;
        Ok(Self {
            geometry,
            values,
            mask,
        })
    }

    #[inline]
    pub fn value(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.geometry.width + col]
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.geometry.width + col]
    }
}

/// Checks valid cells are in `[0, 1]` and zeroes masked cells.
fn validate_frame(frame: usize, g: &GridGeometry, values: &mut [f32], mask: &[bool]) -> Result<()> {
    for (i, (v, &valid)) in values.iter_mut().zip(mask).enumerate() {
        if !valid {
            *v = 0.0;
        } else if !(0.0..=1.0).contains(v) {
            return Err(Error::ValueOutOfRange {
                frame,
                row: i / g.width,
                col: i % g.width,
                value: *v,
            });
        }
    }
    Ok(())
}

/// Time-ordered stack of fields sharing one geometry and mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSeries {
    geometry: GridGeometry,
    mask: Vec<bool>,
    frames: Vec<Vec<f32>>,
    timestamps: Vec<NaiveDate>,
    cadence: Cadence,
}

impl FieldSeries {
    pub fn new(
        geometry: GridGeometry,
        mask: Vec<bool>,
        frames: Vec<Vec<f32>>,
        timestamps: Vec<NaiveDate>,
        cadence: Cadence,
    ) -> Result<Self> {
        if mask.len() != geometry.cells() {
            return Err(Error::Shape(format!(
                "mask has {} cells, grid has {}",
                mask.len(),
                geometry.cells()
            )));
        }
        if frames.len() != timestamps.len() {
            return Err(Error::Shape(format!(
                "{} frames for {} timestamps",
                frames.len(),
                timestamps.len()
            )));
        }
        validate_timestamps(&timestamps, cadence)?;
        let mut frames = frames;
        for (f, frame) in frames.iter_mut().enumerate() {
            if frame.len() != geometry.cells() {
                return Err(Error::Shape(format!(
                    "frame {f} has {} cells, grid has {}",
                    frame.len(),
                    geometry.cells()
                )));
            }
            validate_frame(f, &geometry, frame, &mask)?;
        }
        Ok(Self {
            geometry,
            mask,
            frames,
            timestamps,
            cadence,
        })
    }

    pub fn geometry(&self) -> GridGeometry {
        self.geometry
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn cadence(&self) -> Cadence {
        self.cadence
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn timestamps(&self) -> &[NaiveDate] {
        &self.timestamps
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.frames[i]
    }

    pub fn frames(&self) -> &[Vec<f32>] {
        &self.frames
    }

    pub fn field(&self, i: usize) -> GridField {
        GridField {
            geometry: self.geometry,
            values: self.frames[i].clone(),
            mask: self.mask.clone(),
        }
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        self.timestamps.binary_search(&date).ok()
    }

    /// Frames `range` stacked as tensor channels, oldest first.
    pub fn tensor(&self, range: std::ops::Range<usize>) -> Tensor3<f32> {
        let g = self.geometry;
        let mut data = Vec::with_capacity(range.len() * g.cells());
        for f in &self.frames[range.clone()] {
            data.extend_from_slice(f);
        }
        Tensor3::from_vec(Shape3::new(range.len(), g.height, g.width), data)
            .expect("validated frames")
    }

    /// Sub-series of the frames selected by `keep`, preserving order.
    pub fn select(&self, keep: impl Fn(usize, NaiveDate) -> bool, cadence: Cadence) -> Result<Self> {
        let mut frames = Vec::new();
        let mut timestamps = Vec::new();
        for (i, (&d, f)) in self.timestamps.iter().zip(&self.frames).enumerate() {
            if keep(i, d) {
                frames.push(f.clone());
                timestamps.push(d);
            }
        }
        validate_timestamps(&timestamps, cadence)?;
        Ok(Self {
            geometry: self.geometry,
            mask: self.mask.clone(),
            frames,
            timestamps,
            cadence,
        })
    }
}

fn validate_timestamps(ts: &[NaiveDate], cadence: Cadence) -> Result<()> {
    let fail = |index: usize, detail: String| Error::Timestamps {
        cadence: cadence.as_str(),
        index,
        detail,
    };
    match cadence {
        Cadence::Daily => {
            for (i, pair) in ts.windows(2).enumerate() {
                let gap = (pair[1] - pair[0]).num_days();
                if gap != 1 {
                    return Err(fail(
                        i + 1,
                        format!("{} follows {} (gap {gap} days)", pair[1], pair[0]),
                    ));
                }
            }
        }
        Cadence::Weekly => {
            let mut prev: Option<i64> = None;
            for (i, &d) in ts.iter().enumerate() {
                let g = global_week(d)
                    .ok_or_else(|| fail(i, format!("{d} does not start a calendar week")))?;
                if let Some(p) = prev {
                    if g != p + 1 {
                        return Err(fail(i, format!("{d} is not the week after {}", week_start(p))));
                    }
                }
                prev = Some(g);
            }
        }
    }
    Ok(())
}
