//! Split-aware preprocessing of a store into model-ready samples.

use serde::{Deserialize, Serialize};

use crate::data_io::Store;
use crate::geometry::{
    enumerate_paths, make_split, select_forward_paths, ForwardPathSet, LayoutMetadata, PathSet, Point,
    SplitAssignment, SplitName, TransducerLayout,
};
use crate::graphs::{build_inverse_graph, ForwardTopology, InverseGraph};
use crate::signal_prep::{BandSpec, FilterSpec, Preprocessor, RawSample, SampleLabel};
use crate::tensor::Matrix;
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepConfig {
    pub filter: FilterSpec,
    pub band: BandSpec,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            filter: FilterSpec::default(),
            band: BandSpec::default(),
        }
    }
}

/// One preprocessed sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample<T> {
    pub id: String,
    pub label: SampleLabel,
    pub graph: InverseGraph<T>,
    /// Energy deviation per plate-spanning path.
    pub delta_e: Vec<T>,
}

impl<T: Scalar> PreparedSample<T> {
    pub fn target(&self) -> Point {
        self.label.target()
    }

    pub fn is_damaged(&self) -> bool {
        self.label.is_damaged()
    }
}

/// Preprocessed partitions of one split and seed.
#[derive(Clone, Debug)]
pub struct PreparedSplit<T> {
    pub assignment: SplitAssignment,
    pub layout: TransducerLayout,
    pub metadata: LayoutMetadata,
    pub paths: PathSet,
    pub fwd_paths: ForwardPathSet,
    pub bin_indices: Vec<usize>,
    pub e_max: f64,
    pub train: Vec<PreparedSample<T>>,
    pub val: Vec<PreparedSample<T>>,
    pub test: Vec<PreparedSample<T>>,
}

impl<T: Scalar> PreparedSplit<T> {
    pub fn bins(&self) -> usize {
        self.bin_indices.len()
    }

    pub fn forward_topology(&self) -> ForwardTopology {
        ForwardTopology::new(&self.layout, &self.fwd_paths)
    }

    pub fn side_length_mm(&self) -> f64 {
        self.metadata.side_length_mm
    }
}

fn load_all<T: Scalar>(store: &Store, ids: &[String]) -> Result<Vec<(String, RawSample<T>)>> {
    ids.iter().map(|id| Ok((id.clone(), store.load(id)?))).collect()
}

/// Loads, partitions and preprocesses a store. Normalisation and the
/// pristine reference are fitted on the training partition alone.
pub fn prepare_split<T: Scalar>(
    store: &Store,
    split: SplitName,
    seed: u64,
    cfg: &PrepConfig,
) -> Result<PreparedSplit<T>> {
    let metadata = store.layout().clone();
    let layout = metadata.layout()?;
    let catalog = metadata.catalog()?;
    let paths = enumerate_paths(layout.len())?;
    let fwd_paths = select_forward_paths(&paths, &layout)?;
    let assignment = make_split(split, &catalog, &store.keys()?, seed)?;

    let train_ids: Vec<String> = assignment.train_ids().cloned().collect();
    let train_raw = load_all::<T>(store, &train_ids)?;
    for (id, s) in &train_raw {
        if s.signals.cols() != paths.len() {
            return Err(Error::Data(format!(
                "sample {id} has {} paths, layout needs {}",
                s.signals.cols(),
                paths.len()
            )));
        }
    }
    let samples: Vec<RawSample<T>> = train_raw.iter().map(|(_, s)| s.clone()).collect();
    let pre = Preprocessor::fit(&samples, cfg.filter, cfg.band, &fwd_paths)?;

    let prepare = |(id, raw): (String, RawSample<T>)| -> Result<PreparedSample<T>> {
        let feats = pre.transform(&raw)?;
        Ok(PreparedSample {
            graph: build_inverse_graph(&layout, &paths, &feats.descriptor)?,
            delta_e: feats.delta_e,
            label: raw.label,
            id,
        })
    };
    let train = train_raw.into_iter().map(prepare).collect::<Result<Vec<_>>>()?;
    let val_ids: Vec<String> = assignment.val_damaged.iter().chain(&assignment.val_pristine).cloned().collect();
    let test_ids: Vec<String> = assignment.test_damaged.iter().chain(&assignment.test_pristine).cloned().collect();
    let val = load_all::<T>(store, &val_ids)?.into_iter().map(prepare).collect::<Result<Vec<_>>>()?;
    let test = load_all::<T>(store, &test_ids)?.into_iter().map(prepare).collect::<Result<Vec<_>>>()?;
    Ok(PreparedSplit {
        assignment,
        layout,
        metadata,
        paths,
        fwd_paths,
        bin_indices: pre.band.bin_indices.clone(),
        e_max: pre.stats.e_max.to_f64_lossy(),
        train,
        val,
        test,
    })
}

/// Serializable form of a [`PreparedSplit`] used as the on-disk prep cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedSplitRecord {
    pub config_hash: String,
    pub assignment: SplitAssignment,
    pub metadata: LayoutMetadata,
    pub bin_indices: Vec<usize>,
    pub e_max: f64,
    pub train: Vec<PreparedSampleRecord>,
    pub val: Vec<PreparedSampleRecord>,
    pub test: Vec<PreparedSampleRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedSampleRecord {
    pub id: String,
    pub label: SampleLabel,
    /// `P × 2K` descriptor, row-major.
    pub descriptor: Vec<f64>,
    pub delta_e: Vec<f64>,
}

impl<T: Scalar> PreparedSplit<T> {
    pub fn to_record(&self, config_hash: &str) -> PreparedSplitRecord {
        let rec = |s: &PreparedSample<T>| {
            let g = &s.graph;
            let width = g.edge_features.cols() - crate::graphs::GEOMETRY_WIDTH;
            let descriptor = (0..g.n_paths)
                .flat_map(|r| g.edge_features.row(r)[crate::graphs::GEOMETRY_WIDTH..].to_vec())
                .map(|v| v.to_f64_lossy())
                .collect::<Vec<_>>();
            debug_assert_eq!(descriptor.len(), g.n_paths * width);
            PreparedSampleRecord {
                id: s.id.clone(),
                label: s.label.clone(),
                descriptor,
                delta_e: s.delta_e.iter().map(|v| v.to_f64_lossy()).collect(),
            }
        };
        PreparedSplitRecord {
            config_hash: config_hash.to_string(),
            assignment: self.assignment.clone(),
            metadata: self.metadata.clone(),
            bin_indices: self.bin_indices.clone(),
            e_max: self.e_max,
            train: self.train.iter().map(rec).collect(),
            val: self.val.iter().map(rec).collect(),
            test: self.test.iter().map(rec).collect(),
        }
    }

    pub fn from_record(rec: &PreparedSplitRecord) -> Result<Self> {
        let layout = rec.metadata.layout()?;
        let paths = enumerate_paths(layout.len())?;
        let fwd_paths = select_forward_paths(&paths, &layout)?;
        let width = 2 * rec.bin_indices.len();
        let sample = |s: &PreparedSampleRecord| -> Result<PreparedSample<T>> {
            if s.descriptor.len() != paths.len() * width || s.delta_e.len() != fwd_paths.len() {
                return Err(Error::Data(format!("cached sample {} has wrong dimensions", s.id)));
            }
            let desc = Matrix::from_vec(paths.len(), width, s.descriptor.iter().map(|&v| T::lit(v)).collect());
            Ok(PreparedSample {
                id: s.id.clone(),
                label: s.label.clone(),
                graph: build_inverse_graph(&layout, &paths, &desc)?,
                delta_e: s.delta_e.iter().map(|&v| T::lit(v)).collect(),
            })
        };
        Ok(Self {
            assignment: rec.assignment.clone(),
            metadata: rec.metadata.clone(),
            bin_indices: rec.bin_indices.clone(),
            e_max: rec.e_max,
            train: rec.train.iter().map(sample).collect::<Result<_>>()?,
            val: rec.val.iter().map(sample).collect::<Result<_>>()?,
            test: rec.test.iter().map(sample).collect::<Result<_>>()?,
            layout,
            paths,
            fwd_paths,
        })
    }
}
