//! Ingestion of an exported OGW-1 measurement directory.
//!
//! Expected source layout:
//!
//! ```text
//! <source>/index.json
//! <source>/<file>.csv      one per measurement, listed in the index
//! ```
//!
//! `index.json`:
//!
//! ```json
//! {
//!   "sampling_rate_hz": 10000000.0,
//!   "layout": { ...optional layout metadata, default plate when absent... },
//!   "measurements": [
//!     { "file": "run_0001.csv", "excitation_hz": 100000.0, "damage": ["D7"] },
//!     { "file": "run_0002.csv", "excitation_hz": 100000.0, "damage": [] }
//!   ]
//! }
//! ```
//!
//! Each CSV holds one row per time sample and one column per path in
//! canonical order; a non-numeric first row is treated as a header.
//! Measurements at other excitation frequencies and multi-defect runs are
//! skipped.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Store, StoreWriter};
use crate::geometry::{enumerate_paths, LayoutMetadata};
use crate::signal_prep::{RawSample, SampleLabel};
use crate::tensor::Matrix;
use crate::{Error, Result};

pub const OGW_EXCITATION_HZ: f64 = 100e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OgwMeasurement {
    pub file: String,
    pub excitation_hz: f64,
    #[serde(default)]
    pub damage: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OgwIndex {
    pub sampling_rate_hz: f64,
    #[serde(default)]
    pub layout: Option<LayoutMetadata>,
    pub measurements: Vec<OgwMeasurement>,
}

fn ingestion(path: &Path, msg: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn read_csv(path: &Path, expected_cols: usize) -> Result<Matrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ingestion(path, e.to_string()))?;
    let mut data: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| ingestion(path, e.to_string()))?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => {
                if row.len() != expected_cols {
                    return Err(Error::Schema {
                        path: path.to_path_buf(),
                        msg: format!(
                            "row {} has {} columns, expected {expected_cols} paths",
                            line + 1,
                            row.len()
                        ),
                    });
                }
                data.push(row);
            }
            Err(_) if line == 0 => {
                if rec.len() != expected_cols {
                    return Err(Error::Schema {
                        path: path.to_path_buf(),
                        msg: format!("header has {} columns, expected {expected_cols} paths", rec.len()),
                    });
                }
            }
            Err(e) => return Err(ingestion(path, format!("row {}: {e}", line + 1))),
        }
    }
    if data.is_empty() {
        return Err(ingestion(path, "no samples"));
    }
    Ok(Matrix::from_fn(data.len(), expected_cols, |r, c| data[r][c]))
}

/// Converts the 100 kHz single-defect measurements under `source` into a
/// canonical store at `root`. Nothing is written at `root` unless every
/// selected measurement parses.
pub fn ingest_ogw(source: &Path, root: &Path, excitation_hz: f64) -> Result<Store> {
    let index_path = source.join("index.json");
    let text = std::fs::read_to_string(&index_path)
        .map_err(|e| ingestion(&index_path, format!("cannot read index: {e}")))?;
    let index: OgwIndex = serde_json::from_str(&text).map_err(|e| ingestion(&index_path, e.to_string()))?;
    if !(index.sampling_rate_hz > 0.0) {
        return Err(ingestion(&index_path, "sampling rate must be positive"));
    }
    let meta = index.layout.clone().unwrap_or_else(LayoutMetadata::default_ogw);
    let layout = meta.layout()?;
    let catalog = meta.catalog()?;
    let n_paths = enumerate_paths(layout.len())?.len();

    let selected: Vec<&OgwMeasurement> = index
        .measurements
        .iter()
        .filter(|m| (m.excitation_hz - excitation_hz).abs() < 0.5 && m.damage.len() <= 1)
        .collect();
    if selected.is_empty() {
        return Err(ingestion(
            &index_path,
            format!("no single-defect measurements at {excitation_hz} Hz"),
        ));
    }

    let mut writer = StoreWriter::begin(root)?;
    let mut len = None;
    let mut damaged = std::collections::BTreeMap::<String, usize>::new();
    let mut pristine = 0usize;
    let mut files: Vec<PathBuf> = Vec::new();
    for m in selected {
        let path = source.join(&m.file);
        let signals = read_csv(&path, n_paths)?;
        match len {
            None => len = Some(signals.rows()),
            Some(t) if t != signals.rows() => {
                return Err(Error::Schema {
                    path,
                    msg: format!("{} samples, previous files have {t}", signals.rows()),
                })
            }
            _ => {}
        }
        let (id, label) = match m.damage.first() {
            Some(d) => {
                let coordinate = catalog
                    .get(d)
                    .ok_or_else(|| ingestion(&path, format!("damage label {d} not in layout metadata")))?;
                let rep = damaged.entry(d.clone()).or_default();
                let id = format!("{d}_{rep:02}");
                *rep += 1;
                (
                    id,
                    SampleLabel::Damaged {
                        label: d.clone(),
                        coordinate,
                    },
                )
            }
            None => {
                let id = format!("P_{pristine:03}");
                pristine += 1;
                (id, SampleLabel::Pristine)
            }
        };
        let sample = RawSample {
            signals,
            label,
            sampling_rate_hz: index.sampling_rate_hz,
            excitation_freq_hz: m.excitation_hz,
        };
        writer.write_sample(&id, &sample, None)?;
        files.push(path);
    }
    let n_damaged: usize = damaged.values().sum();
    log::info!("ingested {n_damaged} damaged and {pristine} pristine measurements");
    let provenance = serde_json::json!({
        "excitation_hz": excitation_hz,
        "sampling_rate_hz": index.sampling_rate_hz,
        "files": index.measurements.iter().map(|m| &m.file).collect::<Vec<_>>(),
        "selected": files.len(),
    });
    writer.commit("ogw", meta, provenance)
}
