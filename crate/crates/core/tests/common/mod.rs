use seaice_core::grid::{weekly_calendar, Cadence, FieldSeries, GridGeometry};

/// Weekly series on an `h × w` grid from `f(t, row, col)`.
pub fn weekly(start_year: i32, years: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> FieldSeries {
    let cal = weekly_calendar(start_year, years);
    let frames = (0..cal.len())
        .map(|t| (0..h * w).map(|i| f(t, i / w, i % w)).collect())
        .collect();
    FieldSeries::new(GridGeometry::new(h, w, 14.0).unwrap(), vec![true; h * w], frames, cal, Cadence::Weekly).unwrap()
}

/// A band of ice above a row that moves with the week.
pub fn moving_edge(t: usize, row: usize) -> f32 {
    let edge = 4.0 + 3.0 * ((t % 52) as f64 / 52.0 * std::f64::consts::TAU).cos();
    if (row as f64) < edge + 4.0 {
        0.95
    } else {
        0.1
    }
}
