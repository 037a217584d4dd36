//! File formats: PGM/PPM images, filter banks, and CSV tables.

mod bank;
mod pnm;

pub use bank::{
    decode_filter_bank, encode_filter_bank, read_filter_bank, read_metadata, sidecar_path, write_filter_bank, FilterBank,
    MAGIC,
};
pub use pnm::{decode_pgm, encode_pgm, error_color, read_pgm, read_pgm_dir, write_error_map, write_pgm, write_pgm_with};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub task: String,
    pub setting: String,
    #[serde(rename = "L")]
    pub l: usize,
    pub symmetry: String,
    pub split: String,
    pub psnr_mean: f64,
}

/// Writes any serializable rows as CSV with a header. Reals use the
/// shortest representation that parses back to the same value.
pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    read_csv(path)
}

/// Writes a header and pre-formatted records.
pub fn write_table(path: impl AsRef<Path>, header: &[&str], records: &[Vec<String>]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in records {
        w.write_record(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}
