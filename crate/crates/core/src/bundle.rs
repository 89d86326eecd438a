use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::grid::{global_week, week_start, Cadence, FieldSeries, GridGeometry, WEEKS_PER_YEAR};
use crate::tensor::Tensor3;

/// One year of weekly forecasts issued on a single date.
///
/// Channel `i` is the forecast for the week starting `i` weeks after
/// `issue_date`. Values lie in `[0, 1]`; masked cells hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastBundle {
    pub issue_date: NaiveDate,
    pub values: Tensor3<f32>,
    pub geometry: GridGeometry,
    pub mask: Vec<bool>,
    pub provenance: String,
}

impl ForecastBundle {
    pub fn new(
        issue_date: NaiveDate,
        values: Tensor3<f32>,
        geometry: GridGeometry,
        mask: Vec<bool>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if global_week(issue_date).is_none() {
            return Err(Error::Misaligned(format!("{issue_date} does not start a calendar week")));
        }
        if values.channels() != WEEKS_PER_YEAR
            || values.height() != geometry.height
            || values.width() != geometry.width
            || mask.len() != geometry.cells()
        {
            return Err(Error::Shape(format!(
                "bundle values {} for grid {}x{}",
                values.shape(),
                geometry.height,
                geometry.width
            )));
        }
        let mut values = values;
        let plane = geometry.cells();
        for (i, v) in values.as_mut_slice().iter_mut().enumerate() {
            if !mask[i % plane] {
                *v = 0.0;
            } else if !(0.0..=1.0).contains(v) {
                return Err(Error::Shape(format!("bundle value {v} outside [0, 1]")));
            }
        }
        Ok(Self {
            issue_date,
            values,
            geometry,
            mask,
            provenance: provenance.into(),
        })
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        let g0 = global_week(self.issue_date).expect("validated issue date");
        (0..WEEKS_PER_YEAR as i64).map(|i| week_start(g0 + i)).collect()
    }

    pub fn to_series(&self) -> FieldSeries {
        let frames = (0..WEEKS_PER_YEAR)
            .map(|c| self.values.channel(c).to_vec())
            .collect();
        FieldSeries::new(self.geometry, self.mask.clone(), frames, self.dates(), Cadence::Weekly)
            .expect("bundle invariants imply a valid series")
    }

    /// Reads a bundle back from a 52-frame weekly series.
    pub fn from_series(series: &FieldSeries, provenance: impl Into<String>) -> Result<Self> {
        if series.len() != WEEKS_PER_YEAR || series.cadence() != Cadence::Weekly {
            return Err(Error::Shape(format!(
                "a forecast bundle needs {WEEKS_PER_YEAR} weekly frames, got {}",
                series.len()
            )));
        }
        Self::new(
            series.timestamps()[0],
            series.tensor(0..WEEKS_PER_YEAR),
            series.geometry(),
            series.mask().to_vec(),
            provenance,
        )
    }
}
