//! Ice-edge verification: threshold a concentration field, trace the edge
//! with marching squares, resample it and measure signed distances to a
//! reference edge.
//!
//! Coordinates are `(x, y)` in grid cells with cell centres at integer
//! positions (`x` = column, `y` = row). The traced field is padded with a
//! ring of open water, so every contour is closed; ice touching the domain
//! boundary is closed off half a cell outside it.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::bundle::ForecastBundle;
use crate::error::{Error, Result};
use crate::grid::{FieldSeries, GridField};

pub const DEFAULT_THRESHOLD: f64 = 0.8;
pub const DEFAULT_POINTS: usize = 100;

/// `true` marks ice: a valid cell with concentration above the threshold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Strict comparison: a cell at exactly `threshold` is not ice. Values are
/// compared in single precision, the precision they are stored in.
pub fn binarize(field: &GridField, threshold: f64) -> BinaryMask {
    binarize_values(&field.values, &field.mask, field.geometry.height, field.geometry.width, threshold)
}

pub fn binarize_values(values: &[f32], mask: &[bool], height: usize, width: usize, threshold: f64) -> BinaryMask {
    BinaryMask {
        height,
        width,
        bits: values.iter().zip(mask).map(|(&v, &m)| m && v > threshold as f32).collect(),
    }
}

/// A closed polyline; the last point connects back to the first.
#[derive(Clone, Debug, PartialEq)]
pub struct Contour {
    pub points: Vec<[f64; 2]>,
}

impl Contour {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn segments(&self) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        let n = self.points.len();
        (0..n).map(move |i| (self.points[i], self.points[(i + 1) % n]))
    }

    pub fn perimeter(&self) -> f64 {
        self.segments().map(|(a, b)| dist(a, b)).sum()
    }

    /// Shoelace area; the sign gives the orientation.
    pub fn signed_area(&self) -> f64 {
        0.5 * self.segments().map(|(a, b)| a[0] * b[1] - b[0] * a[1]).sum::<f64>()
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    /// Even-odd ray casting; boundary points may land on either side.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let mut inside = false;
        for (a, b) in self.segments() {
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
                if p[0] < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Distance from `p` to the nearest point of any segment.
    pub fn distance_to(&self, p: [f64; 2]) -> f64 {
        self.segments().map(|(a, b)| point_segment_distance(p, a, b)).fold(f64::INFINITY, f64::min)
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return dist(p, a);
    }
    let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
    dist(p, [a[0] + t * dx, a[1] + t * dy])
}

/// Every closed marching-squares loop of the mask, in a deterministic order.
///
/// Loops keep ice on the same side, so outer edges and holes have opposite
/// orientation. Diagonally touching ice cells are traced as separate bodies.
pub fn extract_contours(mask: &BinaryMask) -> Vec<Contour> {
    let (h, w) = (mask.height, mask.width);
    // Padded lookup: padded (i, j) is cell (i - 1, j - 1).
    let ice = |i: usize, j: usize| i >= 1 && j >= 1 && i <= h && j <= w && mask.get(i - 1, j - 1);
    // Edge midpoints in doubled padded coordinates (row, col).
    let mut next: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    for i in 0..=h {
        for j in 0..=w {
            let (tl, tr, br, bl) = (ice(i, j), ice(i, j + 1), ice(i + 1, j + 1), ice(i + 1, j));
            // Square edges walked clockwise: (from corner, to corner, midpoint).
            let edges = [
                (tl, tr, (2 * i, 2 * j + 1)),
                (tr, br, (2 * i + 1, 2 * j + 2)),
                (br, bl, (2 * i + 2, 2 * j + 1)),
                (bl, tl, (2 * i + 1, 2 * j)),
            ];
            // Pair each water-to-ice crossing with the next ice-to-water one.
            for e in 0..4 {
                let (from, to, start) = edges[e];
                if from || !to {
                    continue;
                }
                for step in 1..4 {
                    let (f, t, end) = edges[(e + step) % 4];
                    if f && !t {
                        next.insert(start, end);
                        break;
                    }
                }
            }
        }
    }
    let mut loops = Vec::new();
    while let Some((&start, _)) = next.iter().next() {
        let mut points = Vec::new();
        let mut cur = start;
        while let Some(n) = next.remove(&cur) {
            points.push([cur.1 as f64 / 2.0 - 1.0, cur.0 as f64 / 2.0 - 1.0]);
            cur = n;
        }
        loops.push(Contour { points });
    }
    loops
}

/// The loop enclosing the largest area.
pub fn extract_contour(mask: &BinaryMask) -> Result<Contour> {
    let ice = mask.count();
    if ice == 0 || ice == mask.bits.len() {
        return Err(Error::NoEdge(format!(
            "{} of {} cells are ice",
            ice,
            mask.bits.len()
        )));
    }
    let mut best: Option<Contour> = None;
    for c in extract_contours(mask) {
        if best.as_ref().is_none_or(|b| c.area() > b.area()) {
            best = Some(c);
        }
    }
    best.ok_or_else(|| Error::NoEdge("no contour traced".into()))
}

/// `n` points spaced evenly by arc length, starting at the first vertex.
pub fn resample_contour(c: &Contour, n: usize) -> Result<Contour> {
    let perimeter = c.perimeter();
    if n == 0 || c.len() < 2 || !(perimeter > 0.0) {
        return Err(Error::DegenerateContour(format!(
            "{} vertices, perimeter {perimeter}, {n} points requested",
            c.len()
        )));
    }
    let step = perimeter / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut segs = c.segments();
    let (mut a, mut b) = segs.next().expect("at least two vertices");
    let mut seg_start = 0.0;
    let mut seg_len = dist(a, b);
    for k in 0..n {
        let s = k as f64 * step;
        while s > seg_start + seg_len {
            match segs.next() {
                Some((na, nb)) => {
                    seg_start += seg_len;
                    (a, b) = (na, nb);
                    seg_len = dist(a, b);
                }
                None => break,
            }
        }
        let t = if seg_len > 0.0 { ((s - seg_start) / seg_len).clamp(0.0, 1.0) } else { 0.0 };
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    Ok(Contour { points: out })
}

/// Five-number summary with linearly interpolated quartiles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
        };
        Some(Self {
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeDistanceResult {
    /// Signed distance of each point, in grid cells.
    pub per_point: Vec<f64>,
    pub mean: f64,
    pub quartiles: Quartiles,
}

impl EdgeDistanceResult {
    pub fn from_distances(per_point: Vec<f64>) -> Result<Self> {
        let quartiles = Quartiles::of(&per_point).ok_or_else(|| Error::Empty("no edge points".into()))?;
        let mean = per_point.iter().sum::<f64>() / per_point.len() as f64;
        Ok(Self {
            per_point,
            mean,
            quartiles,
        })
    }

    /// The same result in kilometres.
    pub fn scaled(&self, cell_size_km: f64) -> Self {
        let s = |v: f64| v * cell_size_km;
        Self {
            per_point: self.per_point.iter().map(|&v| s(v)).collect(),
            mean: s(self.mean),
            quartiles: Quartiles {
                min: s(self.quartiles.min),
                q1: s(self.quartiles.q1),
                median: s(self.quartiles.median),
                q3: s(self.quartiles.q3),
                max: s(self.quartiles.max),
            },
        }
    }
}

/// Distance from each `pred` point to the `actual` polyline: positive when
/// the point lies outside `actual` (ice over-extent), negative inside. Points
/// on the polyline count as zero.
pub fn signed_edge_distance(pred: &Contour, actual: &Contour) -> Result<EdgeDistanceResult> {
    if pred.is_empty() || actual.len() < 2 {
        return Err(Error::DegenerateContour("contours need points".into()));
    }
    let per_point = pred
        .points
        .iter()
        .map(|&p| {
            let d = actual.distance_to(p);
            if d == 0.0 || !actual.contains(p) {
                d
            } else {
                -d
            }
        })
        .collect();
    EdgeDistanceResult::from_distances(per_point)
}

/// Both directions pooled: `pred` points against `actual` and vice versa,
/// the latter with its sign flipped so positive still means over-extent.
pub fn symmetric_edge_distance(pred: &Contour, actual: &Contour) -> Result<EdgeDistanceResult> {
    let forward = signed_edge_distance(pred, actual)?;
    let backward = signed_edge_distance(actual, pred)?;
    let mut all = forward.per_point;
    all.extend(backward.per_point.into_iter().map(|d| -d));
    EdgeDistanceResult::from_distances(all)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Predicted points against the actual polyline.
    #[default]
    Directed,
    Symmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeOptions {
    pub threshold: f64,
    pub points: usize,
    pub mode: DistanceMode,
}

impl Default for EdgeOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            points: DEFAULT_POINTS,
            mode: DistanceMode::Directed,
        }
    }
}

/// Edge comparison for one forecast week; `result` is `None` when either
/// field has no edge.
#[derive(Clone, Debug, PartialEq)]
pub struct WeekEdge {
    pub date: NaiveDate,
    pub result: Option<EdgeDistanceResult>,
}

fn edge_of(values: &[f32], mask: &[bool], h: usize, w: usize, threshold: f64) -> Result<Option<Contour>> {
    match extract_contour(&binarize_values(values, mask, h, w, threshold)) {
        Ok(c) => Ok(Some(c)),
        Err(Error::NoEdge(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// One entry per forecast week that has an actual frame.
pub fn edge_distance_series(pred: &ForecastBundle, actuals: &FieldSeries, options: &EdgeOptions) -> Result<Vec<WeekEdge>> {
    let dates = pred.dates();
    let frames = (0..dates.len()).map(|c| pred.values.channel(c));
    edge_distance_steps(dates.iter().copied().zip(frames), &pred.mask, actuals, options)
}

/// [`edge_distance_series`] for a forecast stored as a weekly series.
pub fn edge_distance_for_series(pred: &FieldSeries, actuals: &FieldSeries, options: &EdgeOptions) -> Result<Vec<WeekEdge>> {
    let frames = pred.timestamps().iter().copied().zip(pred.frames().iter().map(Vec::as_slice));
    edge_distance_steps(frames, pred.mask(), actuals, options)
}

/// Edge comparison over `(date, frame)` pairs of a forecast.
pub fn edge_distance_steps<'a>(
    frames: impl IntoIterator<Item = (NaiveDate, &'a [f32])>,
    pred_mask: &[bool],
    actuals: &FieldSeries,
    options: &EdgeOptions,
) -> Result<Vec<WeekEdge>> {
    if !(options.threshold > 0.0 && options.threshold < 1.0) {
        return Err(Error::Config(format!("edge threshold {} outside (0, 1)", options.threshold)));
    }
    let g = actuals.geometry();
    if pred_mask.len() != g.cells() {
        return Err(Error::Shape("forecast grid differs from actual grid".into()));
    }
    let mask: Vec<bool> = actuals.mask().iter().zip(pred_mask).map(|(&a, &b)| a && b).collect();
    let mut out = Vec::new();
    let mut first = None;
    for (date, values) in frames {
        first.get_or_insert(date);
        let Some(t) = actuals.index_of(date) else {
            continue;
        };
        let p = edge_of(values, &mask, g.height, g.width, options.threshold)?;
        let a = edge_of(actuals.frame(t), &mask, g.height, g.width, options.threshold)?;
        let result = match (p, a) {
            (Some(p), Some(a)) => Some(match options.mode {
                DistanceMode::Directed => signed_edge_distance(&resample_contour(&p, options.points)?, &a)?,
                DistanceMode::Symmetric => symmetric_edge_distance(
                    &resample_contour(&p, options.points)?,
                    &resample_contour(&a, options.points)?,
                )?,
            }),
            _ => None,
        };
        out.push(WeekEdge { date, result });
    }
    if out.is_empty() {
        return Err(Error::Misaligned(match first {
            Some(d) => format!("no forecast week from {d} on has an actual frame"),
            None => "empty forecast".into(),
        }));
    }
    Ok(out)
}

/// All per-point distances of the weeks that have an edge, pooled.
pub fn summarize_edges(weeks: &[WeekEdge]) -> Option<EdgeDistanceResult> {
    let all: Vec<f64> = weeks.iter().filter_map(|w| w.result.as_ref()).flat_map(|r| r.per_point.iter().copied()).collect();
    EdgeDistanceResult::from_distances(all).ok()
}

/// CSV with columns `week,mean,min,q1,median,q3,max`; weeks without an edge
/// have empty statistics.
pub fn write_edge_csv<W: Write>(weeks: &[WeekEdge], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["week", "mean", "min", "q1", "median", "q3", "max"])?;
    for w in weeks {
        let mut rec = vec![w.date.to_string()];
        match &w.result {
            Some(r) => {
                let q = r.quartiles;
                rec.extend([r.mean, q.min, q.q1, q.median, q.q3, q.max].map(|v| v.to_string()));
            }
            None => rec.extend(std::iter::repeat_n(String::new(), 6)),
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
