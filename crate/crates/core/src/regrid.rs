//! Bilinear regridding between regular rectangular grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridField, GridGeometry};

/// Placement of a regular grid: cell `(row, col)` is centred at
/// `(x0_km + col * cell_size_km, y0_km + row * cell_size_km)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularGrid {
    pub x0_km: f64,
    pub y0_km: f64,
    pub cell_size_km: f64,
    pub height: usize,
    pub width: usize,
}

impl RegularGrid {
    fn validate(&self) -> Result<()> {
        if !(self.cell_size_km > 0.0) || !self.cell_size_km.is_finite() {
            return Err(Error::Geometry(format!("cell size {} km", self.cell_size_km)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Geometry(format!("empty grid {}x{}", self.height, self.width)));
        }
        Ok(())
    }

    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x0_km + col as f64 * self.cell_size_km,
            self.y0_km + row as f64 * self.cell_size_km,
        )
    }
}

/// Tolerance (in source cells) for destination centres on the source border.
const EDGE_TOL: f64 = 1e-9;

fn axis_weights(pos: f64, n: usize) -> Option<[(usize, f64); 2]> {
    if pos < -EDGE_TOL || pos > (n - 1) as f64 + EDGE_TOL {
        return None;
    }
    let pos = pos.clamp(0.0, (n - 1) as f64);
    let i0 = (pos.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    let t = pos - i0 as f64;
    Some([(i0, 1.0 - t), (i1, t)])
}

/// Regrids raw values; returns the destination values and validity mask.
///
/// Each destination cell blends the four surrounding source cells. Masked
/// sources drop out and the remaining weights are renormalised; a cell whose
/// weighted neighbours are all masked, or that falls outside the source
/// extent, is masked.
pub fn regrid_values(
    values: &[f64],
    mask: &[bool],
    src: &RegularGrid,
    dst: &RegularGrid,
) -> Result<(Vec<f64>, Vec<bool>)> {
    src.validate()?;
    dst.validate()?;
    let n = src.height * src.width;
    if values.len() != n || mask.len() != n {
        return Err(Error::Shape(format!(
            "source grid {}x{} given {} values / {} mask cells",
            src.height,
            src.width,
            values.len(),
            mask.len()
        )));
    }
    let mut out = vec![0.0; dst.height * dst.width];
    let mut out_mask = vec![false; dst.height * dst.width];
    for r in 0..dst.height {
        for c in 0..dst.width {
            let (x, y) = dst.center(r, c);
            let fx = (x - src.x0_km) / src.cell_size_km;
            let fy = (y - src.y0_km) / src.cell_size_km;
            let (Some(wx), Some(wy)) = (axis_weights(fx, src.width), axis_weights(fy, src.height))
            else {
                continue;
            };
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for &(iy, ay) in &wy {
                for &(ix, ax) in &wx {
                    let w = ay * ax;
                    let k = iy * src.width + ix;
                    if w > 0.0 && mask[k] {
                        acc += w * values[k];
                        wsum += w;
                    }
                }
            }
            if wsum > 0.0 {
                out[r * dst.width + c] = acc / wsum;
                out_mask[r * dst.width + c] = true;
            }
        }
    }
    Ok((out, out_mask))
}

pub fn regrid_bilinear(field: &GridField, src: &RegularGrid, dst: &RegularGrid) -> Result<GridField> {
    if field.geometry.height != src.height || field.geometry.width != src.width {
        return Err(Error::Shape(format!(
            "field is {}x{}, source grid is {}x{}",
            field.geometry.height, field.geometry.width, src.height, src.width
        )));
    }
    let values: Vec<f64> = field.values.iter().map(|&v| v as f64).collect();
    let (out, mask) = regrid_values(&values, &field.mask, src, dst)?;
    let geometry = GridGeometry::new(dst.height, dst.width, dst.cell_size_km)?;
    GridField::new(
        geometry,
        out.into_iter().map(|v| (v as f32).clamp(0.0, 1.0)).collect(),
        mask,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, extent: f64) -> RegularGrid {
        RegularGrid {
            x0_km: 0.0,
            y0_km: 0.0,
            cell_size_km: extent / (n - 1) as f64,
            height: n,
            width: n,
        }
    }

    #[test]
    fn identity_regrid() {
        let g = grid(6, 70.0);
        let values: Vec<f64> = (0..36).map(|i| (i as f64 * 0.37) % 1.0).collect();
        let (out, m) = regrid_values(&values, &[true; 36], &g, &g).unwrap();
        assert_eq!(out, values);
        assert!(m.iter().all(|&v| v));
    }

    #[test]
    fn constant_is_preserved() {
        let (out, m) = regrid_values(&[0.42; 100], &[true; 100], &grid(10, 126.0), &grid(23, 126.0)).unwrap();
        assert!(m.iter().all(|&v| v));
        assert!(out.iter().all(|&v| (v - 0.42).abs() < 1e-15));
    }

    #[test]
    fn linear_ramp_is_exact() {
        let (src, dst) = (grid(10, 126.0), grid(14, 126.0));
        let w = 126.0;
        let values: Vec<f64> = (0..100).map(|i| src.center(i / 10, i % 10).0 / w).collect();
        let (out, _) = regrid_values(&values, &[true; 100], &src, &dst).unwrap();
        for r in 0..14 {
            for c in 0..14 {
                let expect = dst.center(r, c).0 / w;
                assert!((out[r * 14 + c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_sources_renormalise_and_outside_is_masked() {
        let src = grid(2, 10.0);
        let dst = RegularGrid { x0_km: 5.0, y0_km: 5.0, cell_size_km: 10.0, height: 2, width: 2 };
        let (out, m) = regrid_values(&[0.2, 0.9, 0.4, 0.6], &[true, false, true, true], &src, &dst).unwrap();
        assert!(m[0]);
        assert!((out[0] - (0.2 + 0.4 + 0.6) / 3.0).abs() < 1e-12);
        assert!(!m[1] && !m[2] && !m[3]);
        let (_, m) = regrid_values(&[0.2, 0.9, 0.4, 0.6], &[false; 4], &src, &dst).unwrap();
        assert!(!m[0]);
    }

    #[test]
    fn zero_cell_size_is_an_error() {
        let mut bad = grid(3, 10.0);
        bad.cell_size_km = 0.0;
        assert!(matches!(regrid_values(&[0.0; 9], &[true; 9], &bad, &grid(3, 10.0)), Err(Error::Geometry(_))));
    }

    #[test]
    fn field_regrid_sets_cell_size() {
        let field = GridField::new(GridGeometry::new(10, 10, 25.0).unwrap(), vec![0.5; 100], vec![true; 100]).unwrap();
        let src = RegularGrid { x0_km: 0.0, y0_km: 0.0, cell_size_km: 25.0, height: 10, width: 10 };
        let dst = RegularGrid { x0_km: 0.0, y0_km: 0.0, cell_size_km: 14.0, height: 17, width: 17 };
        let out = regrid_bilinear(&field, &src, &dst).unwrap();
        assert_eq!(out.geometry.cell_size_km, 14.0);
        assert!(out.values.iter().all(|&v| v == 0.5));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn output_within_input_bounds(values in prop::collection::vec(0.0f64..1.0, 49), n in 2usize..20) {
                let (out, m) = regrid_values(&values, &[true; 49], &grid(7, 60.0), &grid(n, 60.0)).unwrap();
                let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for (v, ok) in out.iter().zip(m) {
                    prop_assert!(ok);
                    prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
                }
            }
        }
    }
}
