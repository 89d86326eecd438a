//! Weekly sparsification, lagged training pairs and calendar-year splits.

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{week_of_year, Cadence, FieldSeries};
use crate::tensor::Tensor3;

/// Keeps the frames that start a calendar week (days 1, 8, ..., 358).
///
/// For a series beginning on January 1 this is every 7th frame from the
/// first, with days 365/366 dropped so that each year yields 52 frames.
pub fn sparsify_weekly(series: &FieldSeries) -> Result<FieldSeries> {
    if series.cadence() != Cadence::Daily {
        return Err(Error::Config("sparsify_weekly expects a daily series".into()));
    }
    if series.len() < 7 {
        return Err(Error::TooShort(format!("{} daily frames, need at least 7", series.len())));
    }
    series.select(|_, d| week_of_year(d).is_some(), Cadence::Weekly)
}

/// A supervised sample: `input` holds the `k` weeks before `issue_date`
/// (oldest first), `target` the `n` weeks from `issue_date` on.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub input: Tensor3<f32>,
    pub target: Tensor3<f32>,
    pub issue_date: NaiveDate,
}

/// Index positions `t` of the issue weeks produced by [`make_training_pairs`].
pub fn pair_positions(len: usize, k: usize, n: usize, stride: usize) -> Result<Vec<usize>> {
    if k == 0 || n == 0 || stride == 0 {
        return Err(Error::Config(format!("k={k}, n={n}, stride={stride} must be positive")));
    }
    if len < k + n {
        return Err(Error::TooShort(format!("{len} frames, need k + n = {}", k + n)));
    }
    Ok((k..=len - n).step_by(stride).collect())
}

pub fn make_training_pairs(series: &FieldSeries, k: usize, n: usize, stride: usize) -> Result<Vec<TrainingPair>> {
    if series.cadence() != Cadence::Weekly {
        return Err(Error::Config("training pairs are built from weekly series".into()));
    }
    Ok(pair_positions(series.len(), k, n, stride)?
        .into_iter()
        .map(|t| TrainingPair {
            input: series.tensor(t - k..t),
            target: series.tensor(t..t + n),
            issue_date: series.timestamps()[t],
        })
        .collect())
}

/// Inclusive range of calendar years; `start > end` denotes an empty range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearRange {
    pub start: i32,
    pub end: i32,
}

impl YearRange {
    pub const fn new(start: i32, end: i32) -> Self {
        Self { start, end }
    }

    pub fn is_empty(&self) -> bool {
        self.start > self.end
    }

    pub fn contains(&self, year: i32) -> bool {
        (self.start..=self.end).contains(&year)
    }

    pub fn years(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            (self.end - self.start + 1) as usize
        }
    }

    fn overlaps(&self, other: &YearRange) -> bool {
        !self.is_empty() && !other.is_empty() && self.start <= other.end && other.start <= self.end
    }
}

impl std::fmt::Display for YearRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.start, self.end)
    }
}

/// Year ranges for the three-phase protocol: fit single models, fit the
/// ensemble on their predictions, refit single models on both, then test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitScheme {
    pub single_model_train: YearRange,
    pub ensemble_train: YearRange,
    pub retrain: YearRange,
    pub test: YearRange,
}

impl SplitScheme {
    /// 1996-2009 single models, 2010-2015 ensemble, 1996-2015 refit, 2016-2022 test.
    pub const fn long_record() -> Self {
        Self {
            single_model_train: YearRange::new(1996, 2009),
            ensemble_train: YearRange::new(2010, 2015),
            retrain: YearRange::new(1996, 2015),
            test: YearRange::new(2016, 2022),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.single_model_train.overlaps(&self.ensemble_train) {
            return Err(Error::Config(format!(
                "single-model years {} overlap ensemble years {}",
                self.single_model_train, self.ensemble_train
            )));
        }
        if !self.test.is_empty() {
            for (name, r) in [
                ("single-model", self.single_model_train),
                ("ensemble", self.ensemble_train),
                ("retrain", self.retrain),
            ] {
                if !r.is_empty() && r.end >= self.test.start {
                    return Err(Error::Config(format!(
                        "test years {} must follow {name} years {r}",
                        self.test
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SplitSeries {
    pub single_model_train: FieldSeries,
    pub ensemble_train: FieldSeries,
    pub retrain: FieldSeries,
    pub test: FieldSeries,
}

pub fn year_slice(series: &FieldSeries, range: YearRange) -> Result<FieldSeries> {
    if !range.is_empty() {
        let (Some(first), Some(last)) = (series.timestamps().first(), series.timestamps().last()) else {
            return Err(Error::Config(format!("years {range} requested from an empty series")));
        };
        if range.start < first.year() || range.end > last.year() {
            return Err(Error::Config(format!(
                "years {range} outside series extent {}-{}",
                first.year(),
                last.year()
            )));
        }
    }
    series.select(|_, d| range.contains(d.year()), series.cadence())
}

pub fn split_series(series: &FieldSeries, scheme: &SplitScheme) -> Result<SplitSeries> {
    scheme.validate()?;
    Ok(SplitSeries {
        single_model_train: year_slice(series, scheme.single_model_train)?,
        ensemble_train: year_slice(series, scheme.ensemble_train)?,
        retrain: year_slice(series, scheme.retrain)?,
        test: year_slice(series, scheme.test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{daily_calendar, weekly_calendar, GridGeometry};

    fn weekly(years: usize, start: i32) -> FieldSeries {
        let cal = weekly_calendar(start, years);
        let frames = (0..cal.len()).map(|i| vec![(i % 100) as f32 / 100.0]).collect();
        FieldSeries::new(GridGeometry::new(1, 1, 14.0).unwrap(), vec![true], frames, cal, Cadence::Weekly).unwrap()
    }

    fn daily(start: NaiveDate, days: usize) -> FieldSeries {
        let cal = daily_calendar(start, days);
        let frames = (0..days).map(|i| vec![(i % 1000) as f32 / 1000.0]).collect();
        FieldSeries::new(GridGeometry::new(1, 1, 14.0).unwrap(), vec![true], frames, cal, Cadence::Daily).unwrap()
    }

    #[test]
    fn sparsify_common_and_leap_years() {
        let jan1 = |y| NaiveDate::from_ymd_opt(y, 1, 1).unwrap();
        let w = sparsify_weekly(&daily(jan1(2021), 365)).unwrap();
        assert_eq!(w.len(), 52);
        assert_eq!(w.cadence(), Cadence::Weekly);
        let days: Vec<u32> = w.timestamps().iter().map(|d| d.ordinal()).collect();
        assert_eq!(days, (0..52).map(|i| 1 + 7 * i).collect::<Vec<_>>());
        // Values are subsampled, not averaged.
        let src = daily(jan1(2021), 365);
        for (i, f) in w.frames().iter().enumerate() {
            assert_eq!(f, src.frame(7 * i));
        }
        assert_eq!(sparsify_weekly(&daily(jan1(2020), 366)).unwrap().len(), 52);
        assert_eq!(sparsify_weekly(&daily(jan1(2019), 365 * 3)).unwrap().len(), 156);
    }

    #[test]
    fn sparsify_rejects_short_and_weekly() {
        assert!(matches!(
            sparsify_weekly(&daily(NaiveDate::from_ymd_opt(2021, 1, 1).unwrap(), 6)),
            Err(Error::TooShort(_))
        ));
        assert!(sparsify_weekly(&weekly(1, 2000)).is_err());
    }

    #[test]
    fn pair_counts() {
        assert_eq!(make_training_pairs(&weekly(3, 2000), 104, 52, 52).unwrap().len(), 1);
        let pairs = make_training_pairs(&weekly(4, 2000), 104, 52, 52).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[1].issue_date, NaiveDate::from_ymd_opt(2003, 1, 1).unwrap());
        assert_eq!(pairs[0].issue_date, NaiveDate::from_ymd_opt(2002, 1, 1).unwrap());
        assert!(matches!(make_training_pairs(&weekly(2, 2000), 104, 52, 52), Err(Error::TooShort(_))));
    }

    #[test]
    fn last_input_precedes_first_target() {
        let s = weekly(5, 2000);
        for p in make_training_pairs(&s, 30, 52, 7).unwrap() {
            let t = s.index_of(p.issue_date).unwrap();
            assert_eq!(p.input.channels(), 30);
            assert_eq!(p.target.channels(), 52);
            assert_eq!(p.input.channel(29), s.frame(t - 1));
            assert_eq!(p.target.channel(0), s.frame(t));
            assert_eq!(p.input.channel(0), s.frame(t - 30));
        }
    }

    #[test]
    fn long_calendar_phase_sizes() {
        let s = weekly(27, 1996);
        let parts = split_series(&s, &SplitScheme::long_record()).unwrap();
        assert_eq!(parts.single_model_train.len(), 14 * 52);
        assert_eq!(parts.ensemble_train.len(), 6 * 52);
        assert_eq!(parts.retrain.len(), 20 * 52);
        assert_eq!(parts.test.len(), 7 * 52);
        assert_eq!(parts.retrain.len() + parts.test.len(), s.len());
        let last_retrain = *parts.retrain.timestamps().last().unwrap();
        assert!(last_retrain < parts.test.timestamps()[0]);
    }

    #[test]
    fn empty_and_out_of_range_years() {
        let s = weekly(3, 2000);
        assert!(year_slice(&s, YearRange::new(1, 0)).unwrap().is_empty());
        assert!(year_slice(&s, YearRange::new(1999, 2000)).is_err());
        let mut bad = SplitScheme::long_record();
        bad.test = YearRange::new(2015, 2022);
        assert!(bad.validate().is_err());
    }
}
