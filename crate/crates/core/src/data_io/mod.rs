//! Canonical sample store, OGW ingestion and the synthetic generator.
//!
//! Store layout:
//!
//! ```text
//! <root>/manifest.json          written last; its presence marks a complete store
//! <root>/samples/<id>.bin       signal matrix (see below)
//! <root>/samples/<id>.json      sidecar metadata
//! <root>/oracle.json            synthetic stores only: true per-path deviations
//! ```
//!
//! A `.bin` file is the 8-byte magic `WGNMAT01`, the row and column counts as
//! little-endian `u64`, then `rows × cols` little-endian `f64` values in
//! column-major order. Rows are time samples, columns are paths in canonical
//! order.

mod ogw;
mod synthetic;

pub use ogw::{ingest_ogw, OgwIndex, OgwMeasurement, OGW_EXCITATION_HZ};
pub use synthetic::{generate_synthetic, point_segment_distance, true_deviation, Oracle, SyntheticConfig};

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geometry::{LayoutMetadata, Point, SampleKey};
use crate::signal_prep::{RawSample, SampleLabel};
use crate::tensor::Matrix;
use crate::{Error, Result, Scalar};

pub const MATRIX_MAGIC: &[u8; 8] = b"WGNMAT01";
pub const STORE_FORMAT: &str = "wavegraph-store/1";
/// Environment variable overriding the default store root.
pub const STORE_ENV: &str = "WAVEGRAPH_STORE";

pub fn write_matrix(path: &Path, m: &Matrix<f64>) -> Result<()> {
    let (rows, cols) = m.shape();
    let mut buf = Vec::with_capacity(24 + 8 * rows * cols);
    buf.extend_from_slice(MATRIX_MAGIC);
    buf.extend_from_slice(&(rows as u64).to_le_bytes());
    buf.extend_from_slice(&(cols as u64).to_le_bytes());
    for c in 0..cols {
        for r in 0..rows {
            buf.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Matrix<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let schema = |msg: String| Error::Schema {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 24 || &bytes[..8] != MATRIX_MAGIC {
        return Err(schema("missing matrix header".into()));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes")) as usize;
    let (rows, cols) = (word(8), word(16));
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(24))
        .ok_or_else(|| schema("matrix dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(schema(format!(
            "{rows}x{cols} matrix needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let mut m = Matrix::zeros(rows, cols);
    for c in 0..cols {
        for r in 0..rows {
            let off = 24 + 8 * (c * rows + r);
            m[(r, c)] = f64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
        }
    }
    Ok(m)
}

/// Sidecar metadata for one stored sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    /// `"damaged"` or `"pristine"`.
    pub label: String,
    pub damage_label: Option<String>,
    pub coordinate: Option<Point>,
    pub sampling_rate_hz: f64,
    pub excitation_freq_hz: f64,
    pub split_hint: Option<String>,
    pub rows: usize,
    pub cols: usize,
}

impl SampleMeta {
    pub fn sample_label(&self) -> Result<SampleLabel> {
        match (self.label.as_str(), &self.damage_label, self.coordinate) {
            ("pristine", None, None) => Ok(SampleLabel::Pristine),
            ("damaged", Some(l), Some(c)) => Ok(SampleLabel::Damaged {
                label: l.clone(),
                coordinate: c,
            }),
            _ => Err(Error::Data(format!(
                "sample {} has inconsistent label fields",
                self.id
            ))),
        }
    }

    pub fn key(&self) -> SampleKey {
        SampleKey {
            id: self.id.clone(),
            damage_label: self.damage_label.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format: String,
    pub source: String,
    pub layout: LayoutMetadata,
    pub samples: Vec<String>,
    /// Generator or ingestion settings, recorded verbatim.
    pub provenance: serde_json::Value,
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<V: for<'de> Deserialize<'de>>(path: &Path) -> Result<V> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Builds a store in a sibling staging directory and moves it into place on
/// [`StoreWriter::commit`]; dropping an uncommitted writer removes the
/// staging directory.
pub struct StoreWriter {
    root: PathBuf,
    staging: PathBuf,
    ids: Vec<String>,
    committed: bool,
}

impl StoreWriter {
    pub fn begin(root: &Path) -> Result<Self> {
        let name = root
            .file_name()
            .ok_or_else(|| Error::Config(format!("store root {} has no name", root.display())))?
            .to_string_lossy()
            .into_owned();
        let staging = root.with_file_name(format!(".{name}.staging"));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        let samples = staging.join("samples");
        fs::create_dir_all(&samples).map_err(|e| Error::io(&samples, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            staging,
            ids: Vec::new(),
            committed: false,
        })
    }

    pub fn write_sample(&mut self, id: &str, sample: &RawSample<f64>, split_hint: Option<&str>) -> Result<()> {
        if id.is_empty() || id.contains(['/', '\\']) || self.ids.iter().any(|x| x == id) {
            return Err(Error::Data(format!("invalid or duplicate sample id {id:?}")));
        }
        let (damage_label, coordinate) = match &sample.label {
            SampleLabel::Damaged { label, coordinate } => (Some(label.clone()), Some(*coordinate)),
            SampleLabel::Pristine => (None, None),
        };
        let meta = SampleMeta {
            id: id.to_string(),
            label: if damage_label.is_some() { "damaged" } else { "pristine" }.to_string(),
            damage_label,
            coordinate,
            sampling_rate_hz: sample.sampling_rate_hz,
            excitation_freq_hz: sample.excitation_freq_hz,
            split_hint: split_hint.map(str::to_string),
            rows: sample.signals.rows(),
            cols: sample.signals.cols(),
        };
        let dir = self.staging.join("samples");
        write_matrix(&dir.join(format!("{id}.bin")), &sample.signals)?;
        write_json(&dir.join(format!("{id}.json")), &meta)?;
        self.ids.push(id.to_string());
        Ok(())
    }

    /// Writes an additional JSON file at the store root.
    pub fn write_extra<V: Serialize>(&self, name: &str, value: &V) -> Result<()> {
        write_json(&self.staging.join(name), value)
    }

    pub fn commit(mut self, source: &str, layout: LayoutMetadata, provenance: serde_json::Value) -> Result<Store> {
        let mut samples = self.ids.clone();
        samples.sort();
        let manifest = StoreManifest {
            format: STORE_FORMAT.to_string(),
            source: source.to_string(),
            layout,
            samples,
            provenance,
        };
        write_json(&self.staging.join("manifest.json"), &manifest)?;
        if self.root.exists() {
            fs::remove_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        }
        if let Some(parent) = self.root.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::rename(&self.staging, &self.root).map_err(|e| Error::io(&self.root, e))?;
        self.committed = true;
        Ok(Store {
            root: self.root.clone(),
            manifest,
        })
    }
}

impl Drop for StoreWriter {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

/// Read access to a committed store.
#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
    manifest: StoreManifest,
}

impl Store {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            let e = std::io::Error::new(std::io::ErrorKind::NotFound, "store directory does not exist");
            return Err(Error::io(root, e));
        }
        let path = root.join("manifest.json");
        if !path.exists() {
            return Err(Error::Data(format!(
                "{} is not a committed store (no manifest.json)",
                root.display()
            )));
        }
        let manifest: StoreManifest = read_json(&path)?;
        if manifest.format != STORE_FORMAT {
            return Err(Error::Schema {
                path,
                msg: format!("unsupported store format {:?}", manifest.format),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn layout(&self) -> &LayoutMetadata {
        &self.manifest.layout
    }

    pub fn ids(&self) -> &[String] {
        &self.manifest.samples
    }

    pub fn meta(&self, id: &str) -> Result<SampleMeta> {
        read_json(&self.root.join("samples").join(format!("{id}.json")))
    }

    pub fn keys(&self) -> Result<Vec<SampleKey>> {
        self.ids().iter().map(|id| Ok(self.meta(id)?.key())).collect()
    }

    pub fn load<T: Scalar>(&self, id: &str) -> Result<RawSample<T>> {
        let meta = self.meta(id)?;
        let path = self.root.join("samples").join(format!("{id}.bin"));
        let m = read_matrix(&path)?;
        if m.shape() != (meta.rows, meta.cols) {
            return Err(Error::Schema {
                path,
                msg: format!(
                    "matrix is {:?}, sidecar says {:?}",
                    m.shape(),
                    (meta.rows, meta.cols)
                ),
            });
        }
        Ok(RawSample {
            signals: m.cast(),
            label: meta.sample_label()?,
            sampling_rate_hz: meta.sampling_rate_hz,
            excitation_freq_hz: meta.excitation_freq_hz,
        })
    }

    pub fn oracle(&self) -> Result<Option<Oracle>> {
        let path = self.root.join("oracle.json");
        if path.exists() {
            read_json(&path).map(Some)
        } else {
            Ok(None)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_round_trip_is_bit_exact_and_column_major() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::from_fn(3, 2, |r, c| (r as f64 + 0.1) * (c as f64 - 7.3));
        let path = dir.path().join("m.bin");
        write_matrix(&path, &m).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], MATRIX_MAGIC);
        assert_eq!(f64::from_le_bytes(bytes[32..40].try_into().unwrap()), m[(1, 0)]);
        assert_eq!(read_matrix(&path).unwrap(), m);
    }

    #[test]
    fn truncated_matrix_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        write_matrix(&path, &Matrix::zeros(4, 4)).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::Schema { .. })));
    }

    #[test]
    fn uncommitted_writer_leaves_nothing_behind() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("store");
        {
            let mut w = StoreWriter::begin(&root).unwrap();
            let s = RawSample {
                signals: Matrix::zeros(4, 2),
                label: SampleLabel::Pristine,
                sampling_rate_hz: 1.0,
                excitation_freq_hz: 1.0,
            };
            w.write_sample("P_00", &s, None).unwrap();
        }
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
        assert!(Store::open(&root).is_err());
    }
}
