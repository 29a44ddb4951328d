//! Plate, transducer layout, propagation paths, damage catalog and the
//! spatial hold-out splits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Normalised coordinate in plate units.
pub type Point = [f64; 2];

/// Reference coordinate assigned to pristine samples. It lies just outside
/// the admissible domain `[0,1]²`.
pub const NO_DAMAGE_TARGET: Point = [-0.001, -0.001];

/// Shipped default layout and damage catalog.
pub const DEFAULT_METADATA_JSON: &str = include_str!("../data/default_layout.json");

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateSpec {
    pub side_length_mm: f64,
}

impl Default for PlateSpec {
    fn default() -> Self {
        Self {
            side_length_mm: 500.0,
        }
    }
}

impl PlateSpec {
    pub fn new(side_length_mm: f64) -> Result<Self> {
        if !(side_length_mm > 0.0) || !side_length_mm.is_finite() {
            return Err(Error::InvalidLayout(format!(
                "plate side length must be positive, got {side_length_mm}"
            )));
        }
        Ok(Self { side_length_mm })
    }

    /// Closed unit square membership.
    pub fn contains(p: Point) -> bool {
        (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransducerLayout {
    coordinates: Vec<Point>,
    top_row: Vec<usize>,
    bottom_row: Vec<usize>,
}

impl TransducerLayout {
    pub fn new(coordinates: Vec<Point>, top_row: Vec<usize>, bottom_row: Vec<usize>) -> Result<Self> {
        let n = coordinates.len();
        for (i, c) in coordinates.iter().enumerate() {
            if !c.iter().all(|v| v.is_finite()) || !PlateSpec::contains(*c) {
                return Err(Error::InvalidLayout(format!(
                    "transducer {i} at {c:?} lies outside the unit square"
                )));
            }
        }
        let top: BTreeSet<usize> = top_row.iter().copied().collect();
        let bottom: BTreeSet<usize> = bottom_row.iter().copied().collect();
        if top.len() != top_row.len() || bottom.len() != bottom_row.len() {
            return Err(Error::InvalidLayout("duplicate index in a row".into()));
        }
        if let Some(i) = top.iter().chain(&bottom).find(|&&i| i >= n) {
            return Err(Error::InvalidLayout(format!(
                "row index {i} out of range for {n} transducers"
            )));
        }
        if top.intersection(&bottom).next().is_some() {
            return Err(Error::InvalidLayout("top and bottom rows overlap".into()));
        }
        Ok(Self {
            coordinates,
            top_row,
            bottom_row,
        })
    }

    pub fn len(&self) -> usize {
        self.coordinates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coordinates.is_empty()
    }

    pub fn coordinates(&self) -> &[Point] {
        &self.coordinates
    }

    pub fn coordinate(&self, i: usize) -> Point {
        self.coordinates[i]
    }

    pub fn top_row(&self) -> &[usize] {
        &self.top_row
    }

    pub fn bottom_row(&self) -> &[usize] {
        &self.bottom_row
    }

    /// Relabels nodes: new index `perm[old]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.len();
        if perm.len() != n || perm.iter().collect::<BTreeSet<_>>().len() != n {
            return Err(Error::InvalidLayout("not a permutation".into()));
        }
        let mut coords = vec![[0.0; 2]; n];
        for (old, &new) in perm.iter().enumerate() {
            coords[new] = self.coordinates[old];
        }
        Self::new(
            coords,
            self.top_row.iter().map(|&i| perm[i]).collect(),
            self.bottom_row.iter().map(|&i| perm[i]).collect(),
        )
    }
}

/// Unordered transducer pairs `(i, j)`, `i < j`, in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathSet {
    pairs: Vec<(usize, usize)>,
    n_nodes: usize,
}

impl PathSet {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Position of the unordered pair `{a, b}`.
    pub fn index_of(&self, a: usize, b: usize) -> Option<usize> {
        let key = (a.min(b), a.max(b));
        self.pairs.binary_search(&key).ok()
    }
}

pub fn enumerate_paths(n: usize) -> Result<PathSet> {
    if n < 2 {
        return Err(Error::InvalidLayout(format!(
            "need at least two transducers, got {n}"
        )));
    }
    let pairs = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    Ok(PathSet { pairs, n_nodes: n })
}

/// Plate-spanning subset: one endpoint in each row. Keeps both the pair and
/// its index in the parent [`PathSet`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardPathSet {
    pairs: Vec<(usize, usize)>,
    parent_index: Vec<usize>,
    n_nodes: usize,
}

impl ForwardPathSet {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn parent_indices(&self) -> &[usize] {
        &self.parent_index
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }
}

pub fn select_forward_paths(paths: &PathSet, layout: &TransducerLayout) -> Result<ForwardPathSet> {
    if layout.top_row().is_empty() || layout.bottom_row().is_empty() {
        return Err(Error::InvalidLayout(
            "forward paths need both a top and a bottom row".into(),
        ));
    }
    let top: BTreeSet<usize> = layout.top_row().iter().copied().collect();
    let bottom: BTreeSet<usize> = layout.bottom_row().iter().copied().collect();
    let mut pairs = Vec::new();
    let mut parent_index = Vec::new();
    for (k, &(i, j)) in paths.pairs().iter().enumerate() {
        let straddles = (top.contains(&i) && bottom.contains(&j))
            || (top.contains(&j) && bottom.contains(&i));
        if straddles {
            pairs.push((i, j));
            parent_index.push(k);
        }
    }
    Ok(ForwardPathSet {
        pairs,
        parent_index,
        n_nodes: paths.n_nodes(),
    })
}

/// Damage label to coordinate, in natural label order (`D1, D2, ..., D10`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DamageCatalog {
    entries: Vec<(String, Point)>,
}

fn natural_key(label: &str) -> (String, u64, String) {
    let split = label
        .find(|c: char| c.is_ascii_digit())
        .unwrap_or(label.len());
    let (prefix, rest) = label.split_at(split);
    let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
    let num = digits.parse().unwrap_or(0);
    (prefix.to_string(), num, label.to_string())
}

impl DamageCatalog {
    pub fn new(entries: impl IntoIterator<Item = (String, Point)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (label, p) in entries {
            if !PlateSpec::contains(p) {
                return Err(Error::Catalog(format!(
                    "damage {label} at {p:?} lies outside the unit square"
                )));
            }
            if map.insert(natural_key(&label), (label.clone(), p)).is_some() {
                return Err(Error::Catalog(format!("duplicate damage label {label}")));
            }
        }
        Ok(Self {
            entries: map.into_values().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Point)] {
        &self.entries
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(l, _)| l.as_str())
    }

    pub fn get(&self, label: &str) -> Option<Point> {
        self.entries
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, p)| *p)
    }
}

/// On-disk layout/catalog metadata.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LayoutMetadata {
    #[serde(default = "default_side")]
    pub side_length_mm: f64,
    pub transducers: Vec<Point>,
    pub top_row: Vec<usize>,
    pub bottom_row: Vec<usize>,
    pub damage: BTreeMap<String, Point>,
}

fn default_side() -> f64 {
    500.0
}

impl LayoutMetadata {
    pub fn default_ogw() -> Self {
        serde_json::from_str(DEFAULT_METADATA_JSON).expect("shipped metadata parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn plate(&self) -> Result<PlateSpec> {
        PlateSpec::new(self.side_length_mm)
    }

    pub fn layout(&self) -> Result<TransducerLayout> {
        TransducerLayout::new(
            self.transducers.clone(),
            self.top_row.clone(),
            self.bottom_row.clone(),
        )
    }

    pub fn catalog(&self) -> Result<DamageCatalog> {
        DamageCatalog::new(self.damage.iter().map(|(k, v)| (k.clone(), *v)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SplitName {
    A,
    B,
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(SplitName::A),
            "B" | "b" => Ok(SplitName::B),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitName::A => write!(f, "A"),
            SplitName::B => write!(f, "B"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PristinePartition {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: SplitName,
    pub test_damage_labels: Vec<String>,
    pub train_damage_labels: Vec<String>,
    pub pristine_val: usize,
    pub pristine_test: usize,
}

impl SplitSpec {
    pub fn held_out_labels(name: SplitName) -> Vec<String> {
        let range = |a: usize, b: usize| (a..=b).map(|i| format!("D{i}")).collect::<Vec<_>>();
        match name {
            SplitName::A => range(21, 24),
            SplitName::B => {
                let mut v = range(1, 4);
                v.extend(range(21, 24));
                v
            }
        }
    }

    pub fn new(name: SplitName, catalog: &DamageCatalog) -> Result<Self> {
        let test = Self::held_out_labels(name);
        for l in &test {
            if catalog.get(l).is_none() {
                return Err(Error::Catalog(format!("split {name} needs label {l}")));
            }
        }
        let held: BTreeSet<&String> = test.iter().collect();
        let train = catalog
            .labels()
            .filter(|l| !held.contains(&l.to_string()))
            .map(str::to_string)
            .collect();
        Ok(Self {
            name,
            test_damage_labels: test,
            train_damage_labels: train,
            pristine_val: 6,
            pristine_test: 6,
        })
    }

    pub fn is_held_out(&self, label: &str) -> bool {
        self.test_damage_labels.iter().any(|l| l == label)
    }
}

/// Minimal view of a sample needed to assign it to a partition.
#[derive(Clone, Debug)]
pub struct SampleKey {
    pub id: String,
    /// `None` for pristine samples.
    pub damage_label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub spec: SplitSpec,
    pub seed: u64,
    pub pristine_partition: PristinePartition,
    pub train_damaged: Vec<String>,
    pub val_damaged: Vec<String>,
    pub test_damaged: Vec<String>,
    pub train_pristine: Vec<String>,
    pub val_pristine: Vec<String>,
    pub test_pristine: Vec<String>,
}

impl Eq for SplitSpec {}

impl SplitAssignment {
    pub fn train_ids(&self) -> impl Iterator<Item = &String> {
        self.train_damaged.iter().chain(&self.train_pristine)
    }
}

/// Number of seen-zone damaged samples reserved for validation: 20 % rounded
/// up, at least two, never the whole pool.
pub fn validation_count(pool: usize) -> usize {
    let n = (pool * 20).div_ceil(100).max(2);
    n.min(pool.saturating_sub(1))
}

/// Assigns samples to train/val/test partitions for `spec` with a seeded
/// shuffle.
pub fn make_split(
    name: SplitName,
    catalog: &DamageCatalog,
    samples: &[SampleKey],
    seed: u64,
) -> Result<SplitAssignment> {
    let spec = SplitSpec::new(name, catalog)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5917);

    let mut pool = Vec::new();
    let mut test_damaged = Vec::new();
    let mut pristine = Vec::new();
    for s in samples {
        match &s.damage_label {
            Some(label) => {
                if catalog.get(label).is_none() {
                    return Err(Error::Catalog(format!(
                        "sample {} references unknown damage {label}",
                        s.id
                    )));
                }
                if spec.is_held_out(label) {
                    test_damaged.push(s.id.clone());
                } else {
                    pool.push(s.id.clone());
                }
            }
            None => pristine.push(s.id.clone()),
        }
    }
    pool.sort();
    test_damaged.sort();
    pristine.sort();

    let need = spec.pristine_val + spec.pristine_test;
    if pristine.len() <= need {
        return Err(Error::InsufficientData(format!(
            "need more than {need} pristine samples, have {}",
            pristine.len()
        )));
    }
    if pool.len() < 3 {
        return Err(Error::InsufficientData(
            "seen-zone damaged pool too small for a validation subset".into(),
        ));
    }

    pool.shuffle(&mut rng);
    let n_val = validation_count(pool.len());
    let mut val_damaged: Vec<String> = pool[..n_val].to_vec();
    let mut train_damaged: Vec<String> = pool[n_val..].to_vec();

    pristine.shuffle(&mut rng);
    let mut test_pristine = pristine[..spec.pristine_test].to_vec();
    let mut val_pristine = pristine[spec.pristine_test..need].to_vec();
    let mut train_pristine = pristine[need..].to_vec();

    for v in [
        &mut val_damaged,
        &mut train_damaged,
        &mut test_pristine,
        &mut val_pristine,
        &mut train_pristine,
    ] {
        v.sort();
    }
    let pristine_partition = PristinePartition {
        train: train_pristine.len(),
        val: val_pristine.len(),
        test: test_pristine.len(),
    };
    Ok(SplitAssignment {
        spec,
        seed,
        pristine_partition,
        train_damaged,
        val_damaged,
        test_damaged,
        train_pristine,
        val_pristine,
        test_pristine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_meta() -> LayoutMetadata {
        LayoutMetadata::default_ogw()
    }

    fn ogw_samples() -> Vec<SampleKey> {
        let mut v: Vec<SampleKey> = (1..=28)
            .map(|i| SampleKey {
                id: format!("dmg_D{i}"),
                damage_label: Some(format!("D{i}")),
            })
            .collect();
        v.extend((0..60).map(|i| SampleKey {
            id: format!("pristine_{i:03}"),
            damage_label: None,
        }));
        v
    }

    #[test]
    fn path_counts() {
        assert_eq!(enumerate_paths(12).unwrap().len(), 66);
        assert_eq!(enumerate_paths(2).unwrap().pairs(), &[(0, 1)]);
        let p4 = enumerate_paths(4).unwrap();
        assert_eq!(p4.len(), 6);
        assert_eq!(p4.pairs()[0], (0, 1));
        assert_eq!(*p4.pairs().last().unwrap(), (2, 3));
        assert!(matches!(enumerate_paths(1), Err(Error::InvalidLayout(_))));
    }

    #[test]
    fn forward_paths_on_default_layout() {
        let layout = default_meta().layout().unwrap();
        let paths = enumerate_paths(layout.len()).unwrap();
        let fwd = select_forward_paths(&paths, &layout).unwrap();
        assert_eq!(fwd.len(), 36);
        for (&(i, j), &k) in fwd.pairs().iter().zip(fwd.parent_indices()) {
            assert_eq!(paths.pairs()[k], (i, j));
        }
    }

    #[test]
    fn forward_paths_small_and_degenerate_layouts() {
        let layout = TransducerLayout::new(vec![[0.1, 0.9], [0.1, 0.1]], vec![0], vec![1]).unwrap();
        let paths = enumerate_paths(2).unwrap();
        assert_eq!(select_forward_paths(&paths, &layout).unwrap().len(), 1);

        let one_row = TransducerLayout::new(vec![[0.1, 0.9], [0.2, 0.9]], vec![0, 1], vec![]).unwrap();
        assert!(matches!(
            select_forward_paths(&paths, &one_row),
            Err(Error::InvalidLayout(_))
        ));
    }

    #[test]
    fn layout_validation() {
        assert!(TransducerLayout::new(vec![[1.2, 0.5]], vec![0], vec![]).is_err());
        assert!(TransducerLayout::new(vec![[0.2, 0.5], [0.3, 0.5]], vec![0], vec![0]).is_err());
    }

    #[test]
    fn catalog_has_28_locations() {
        let cat = default_meta().catalog().unwrap();
        assert_eq!(cat.len(), 28);
        let labels: Vec<_> = cat.labels().take(3).collect();
        assert_eq!(labels, ["D1", "D2", "D3"]);
    }

    #[test]
    fn split_label_sets() {
        let cat = default_meta().catalog().unwrap();
        let a = SplitSpec::new(SplitName::A, &cat).unwrap();
        assert_eq!(a.test_damage_labels.len(), 4);
        assert_eq!(a.train_damage_labels.len(), 24);
        let b = SplitSpec::new(SplitName::B, &cat).unwrap();
        assert_eq!(b.test_damage_labels.len(), 8);
        assert_eq!(b.train_damage_labels.len(), 20);
        for s in [&a, &b] {
            for l in &s.test_damage_labels {
                assert!(!s.train_damage_labels.contains(l));
            }
        }
    }

    #[test]
    fn split_missing_label_is_catalog_error() {
        let cat = DamageCatalog::new(vec![("D1".to_string(), [0.5, 0.5])]).unwrap();
        assert!(matches!(SplitSpec::new(SplitName::A, &cat), Err(Error::Catalog(_))));
    }

    #[test]
    fn split_assignment_partitions() {
        let cat = default_meta().catalog().unwrap();
        let samples = ogw_samples();
        let a = make_split(SplitName::A, &cat, &samples, 0).unwrap();
        let p = a.pristine_partition;
        assert_eq!((p.train, p.val, p.test), (48, 6, 6));
        assert_eq!(p.train + p.val + p.test, 60);
        assert_eq!(a.test_damaged.len(), 4);
        assert_eq!(a.val_damaged.len(), 5);
        assert_eq!(a.train_damaged.len(), 19);
        let again = make_split(SplitName::A, &cat, &samples, 0).unwrap();
        assert_eq!(a, again);
        let b = make_split(SplitName::B, &cat, &samples, 1).unwrap();
        assert_eq!(b.test_damaged.len(), 8);
        assert_eq!(b.val_damaged.len() + b.train_damaged.len(), 20);
    }

    #[test]
    fn validation_count_rule() {
        assert_eq!(validation_count(24), 5);
        assert_eq!(validation_count(20), 4);
        assert_eq!(validation_count(5), 2);
        assert_eq!(validation_count(3), 2);
    }

    proptest! {
        #[test]
        fn enumeration_is_bijective(n in 2usize..40) {
            let p = enumerate_paths(n).unwrap();
            prop_assert_eq!(p.len(), n * (n - 1) / 2);
            let set: BTreeSet<_> = p.pairs().iter().copied().collect();
            prop_assert_eq!(set.len(), p.len());
            prop_assert!(p.pairs().windows(2).all(|w| w[0] < w[1]));
            prop_assert!(p.pairs().iter().all(|&(i, j)| i < j && j < n));
        }

        #[test]
        fn forward_selection_is_row_permutation_invariant(seed in 0u64..1000) {
            let layout = default_meta().layout().unwrap();
            let paths = enumerate_paths(layout.len()).unwrap();
            let mut top = layout.top_row().to_vec();
            let mut bottom = layout.bottom_row().to_vec();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            top.shuffle(&mut rng);
            bottom.shuffle(&mut rng);
            let shuffled = TransducerLayout::new(layout.coordinates().to_vec(), top, bottom).unwrap();
            let a: BTreeSet<_> = select_forward_paths(&paths, &layout).unwrap().pairs().iter().copied().collect();
            let b: BTreeSet<_> = select_forward_paths(&paths, &shuffled).unwrap().pairs().iter().copied().collect();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.len() < paths.len());
        }

        #[test]
        fn split_never_leaks_held_out(seed in 0u64..500) {
            let cat = default_meta().catalog().unwrap();
            let samples = ogw_samples();
            for name in [SplitName::A, SplitName::B] {
                let s = make_split(name, &cat, &samples, seed).unwrap();
                let test: BTreeSet<_> = s.test_damaged.iter().collect();
                for id in s.train_damaged.iter().chain(&s.val_damaged) {
                    prop_assert!(!test.contains(id));
                }
            }
        }
    }
}
