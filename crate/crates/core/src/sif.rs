//! SIF field-stack files: a JSON header next to two little-endian payloads.
//!
//! ```text
//! name.json       {height, width, cell_size_km, cadence, timestamps[], mask_file, data_file}
//! name.mask.bin   one byte per cell, 1 = valid water
//! name.data.bin   f32 LE, frame-major then row-major
//! ```
//!
//! Payload paths in the header are resolved relative to the header's directory.
//!
//! External products (OSI SAF swaths, SEAS5 GRIB, ...) are not read directly.
//! To bring one in, regrid it onto the target grid, write the mask and data
//! payloads in the layout above, and list the frame dates in the header; a
//! weekly forecast must use week-start dates (day-of-year `1 + 7w`).

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Cadence, FieldSeries, GridGeometry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SifHeader {
    pub height: usize,
    pub width: usize,
    pub cell_size_km: f64,
    pub cadence: Cadence,
    pub timestamps: Vec<NaiveDate>,
    pub mask_file: String,
    pub data_file: String,
}

fn payload_names(header_path: &Path) -> (String, String) {
    let stem = header_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "series".into());
    (format!("{stem}.mask.bin"), format!("{stem}.data.bin"))
}

fn sibling(header_path: &Path, name: &str) -> PathBuf {
    header_path
        .parent()
        .map(|p| p.join(name))
        .unwrap_or_else(|| PathBuf::from(name))
}

/// Writes `series` as `header_path` plus `<stem>.mask.bin` / `<stem>.data.bin`.
pub fn save_series(series: &FieldSeries, header_path: impl AsRef<Path>) -> Result<()> {
    let header_path = header_path.as_ref();
    let (mask_file, data_file) = payload_names(header_path);
    let g = series.geometry();
    let header = SifHeader {
        height: g.height,
        width: g.width,
        cell_size_km: g.cell_size_km,
        cadence: series.cadence(),
        timestamps: series.timestamps().to_vec(),
        mask_file,
        data_file,
    };

    let mask: Vec<u8> = series.mask().iter().map(|&m| m as u8).collect();
    let mut data = Vec::with_capacity(series.len() * g.cells() * 4);
    for frame in series.frames() {
        for v in frame {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }

    let json = serde_json::to_string_pretty(&header).map_err(|e| Error::json(header_path, e))?;
    fs::write(header_path, json).map_err(|e| Error::io(header_path, e))?;
    let mask_path = sibling(header_path, &header.mask_file);
    fs::write(&mask_path, mask).map_err(|e| Error::io(&mask_path, e))?;
    let data_path = sibling(header_path, &header.data_file);
    fs::write(&data_path, data).map_err(|e| Error::io(&data_path, e))?;
    Ok(())
}

pub fn read_header(header_path: impl AsRef<Path>) -> Result<SifHeader> {
    let header_path = header_path.as_ref();
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(header_path, e))
}

pub fn load_series(header_path: impl AsRef<Path>) -> Result<FieldSeries> {
    let header_path = header_path.as_ref();
    let header = read_header(header_path)?;
    let geometry = GridGeometry::new(header.height, header.width, header.cell_size_km)?;
    let cells = geometry.cells();

    let mask_path = sibling(header_path, &header.mask_file);
    let mask_bytes = fs::read(&mask_path).map_err(|e| Error::io(&mask_path, e))?;
    if mask_bytes.len() != cells {
        return Err(Error::PayloadSize {
            path: mask_path,
            expected: cells,
            found: mask_bytes.len(),
        });
    }
    let mask = mask_bytes.iter().map(|&b| b != 0).collect();

    let data_path = sibling(header_path, &header.data_file);
    let data = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let expected = header.timestamps.len() * cells * 4;
    if data.len() != expected {
        return Err(Error::PayloadSize {
            path: data_path,
            expected,
            found: data.len(),
        });
    }
    let frames = data
        .chunks_exact(cells * 4)
        .map(|frame| {
            frame
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()
        })
        .collect();

    FieldSeries::new(geometry, mask, frames, header.timestamps, header.cadence)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::weekly_calendar;

    fn sample() -> FieldSeries {
        let g = GridGeometry::new(3, 4, 14.0).unwrap();
        let mut mask = vec![true; 12];
        mask[5] = false;
        let cal = weekly_calendar(2001, 1)[..3].to_vec();
        let frames = (0..3)
            .map(|f| (0..12).map(|i| (((i * 7 + f * 3) % 11) as f32 / 10.0 + 1e-7).min(1.0)).collect())
            .collect();
        FieldSeries::new(g, mask, frames, cal, Cadence::Weekly).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.json");
        let s = sample();
        save_series(&s, &path).unwrap();
        let back = load_series(&path).unwrap();
        assert_eq!(back, s);
        for (a, b) in s.frames().iter().flatten().zip(back.frames().iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let h = read_header(&path).unwrap();
        assert_eq!(h.mask_file, "obs.mask.bin");
        assert_eq!(h.data_file, "obs.data.bin");
    }

    #[test]
    fn short_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.json");
        save_series(&sample(), &path).unwrap();
        let data = dir.path().join("obs.data.bin");
        let bytes = fs::read(&data).unwrap();
        fs::write(&data, &bytes[..2 * 12 * 4]).unwrap();
        match load_series(&path).unwrap_err() {
            Error::PayloadSize { expected, found, .. } => {
                assert_eq!(expected, 3 * 12 * 4);
                assert_eq!(found, 2 * 12 * 4);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn out_of_range_payload_names_cell() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.json");
        save_series(&sample(), &path).unwrap();
        let data = dir.path().join("obs.data.bin");
        let mut bytes = fs::read(&data).unwrap();
        let at = (12 + 6) * 4;
        bytes[at..at + 4].copy_from_slice(&1.7f32.to_le_bytes());
        fs::write(&data, bytes).unwrap();
        let err = load_series(&path).unwrap_err();
        assert!(matches!(err, Error::ValueOutOfRange { frame: 1, row: 1, col: 2, .. }), "{err}");
    }

    #[test]
    fn missing_file_and_bad_timestamps() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_series(dir.path().join("nope.json")), Err(Error::Io { .. })));

        let path = dir.path().join("obs.json");
        save_series(&sample(), &path).unwrap();
        let mut h = read_header(&path).unwrap();
        h.timestamps.swap(0, 1);
        fs::write(&path, serde_json::to_string(&h).unwrap()).unwrap();
        assert!(matches!(load_series(&path), Err(Error::Timestamps { .. })));
    }
}
