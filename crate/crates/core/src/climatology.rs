//! The naive forecast: each week of the coming year is the per-cell mean of
//! the same calendar week over the five preceding years.

use chrono::NaiveDate;

use crate::bundle::ForecastBundle;
use crate::error::{Error, Result};
use crate::grid::{global_week, week_start, Cadence, FieldSeries, WEEKS_PER_YEAR};
use crate::tensor::{Shape3, Tensor3};

pub const CLIMATOLOGY_YEARS: usize = 5;

pub fn climatology_forecast(series: &FieldSeries, issue_date: NaiveDate) -> Result<ForecastBundle> {
    if series.cadence() != Cadence::Weekly {
        return Err(Error::Config("climatology needs a weekly series".into()));
    }
    let issue = global_week(issue_date)
        .ok_or_else(|| Error::Misaligned(format!("{issue_date} does not start a calendar week")))?;
    let Some(&first) = series.timestamps().first() else {
        return Err(Error::InsufficientHistory("empty series".into()));
    };
    let first = global_week(first).expect("weekly series");
    let last = first + series.len() as i64 - 1;
    let lookback = (CLIMATOLOGY_YEARS * WEEKS_PER_YEAR) as i64;
    if issue - lookback < first || issue - 1 > last {
        return Err(Error::InsufficientHistory(format!(
            "issue {issue_date} needs weekly frames {} .. {}, series covers {} .. {}",
            week_start(issue - lookback),
            week_start(issue - 1),
            week_start(first),
            week_start(last)
        )));
    }

    let g = series.geometry();
    let plane = g.cells();
    let mut out = Tensor3::zeros(Shape3::new(WEEKS_PER_YEAR, g.height, g.width));
    for week in 0..WEEKS_PER_YEAR {
        let dst = out.channel_mut(week);
        for cell in 0..plane {
            if !series.mask()[cell] {
                continue;
            }
            let mut acc = 0.0f64;
            for year in 1..=CLIMATOLOGY_YEARS as i64 {
                let idx = (issue + week as i64 - year * WEEKS_PER_YEAR as i64 - first) as usize;
                acc += series.frame(idx)[cell] as f64;
            }
            dst[cell] = (acc / CLIMATOLOGY_YEARS as f64) as f32;
        }
    }
    ForecastBundle::new(issue_date, out, g, series.mask().to_vec(), "climatology")
}
