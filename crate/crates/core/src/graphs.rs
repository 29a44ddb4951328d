//! Direction-expanded measurement graphs.
//!
//! Directed edges are stored as all `i→j` in canonical path order followed by
//! all `j→i` in the same order, so edge `e` and edge `e + P` are reciprocal.

use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::geometry::{ForwardPathSet, PathSet, Point, TransducerLayout};
use crate::tensor::Matrix;
use crate::{Error, Result, Scalar};

/// Width of the geometric part of every edge feature: displacement and length.
pub const GEOMETRY_WIDTH: usize = 3;
/// Forward edge feature width: geometry plus two candidate distances.
pub const FORWARD_FEATURE_WIDTH: usize = 5;

fn directed_edges(pairs: &[(usize, usize)]) -> Vec<(usize, usize)> {
    pairs
        .iter()
        .copied()
        .chain(pairs.iter().map(|&(i, j)| (j, i)))
        .collect()
}

fn geometry_row(coords: &[Point], src: usize, dst: usize) -> [f64; 3] {
    let dx = coords[dst][0] - coords[src][0];
    let dy = coords[dst][1] - coords[src][1];
    [dx, dy, dx.hypot(dy)]
}

/// Graph over all measured paths with spectral edge features.
#[derive(Clone, Debug, PartialEq)]
pub struct InverseGraph<T> {
    pub node_coords: Vec<Point>,
    pub edges: Vec<(usize, usize)>,
    /// `2P × (3 + 2K)`: `[r_dst − r_src, ‖r_dst − r_src‖, descriptor]`.
    pub edge_features: Matrix<T>,
    pub n_paths: usize,
}

impl<T: Scalar> InverseGraph<T> {
    pub fn n_nodes(&self) -> usize {
        self.node_coords.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Number of spectral bins `K`.
    pub fn bins(&self) -> usize {
        (self.edge_features.cols() - GEOMETRY_WIDTH) / 2
    }

    /// One row per measured path (`i<j` direction only), the layout used by
    /// the sequence baselines.
    pub fn path_tokens(&self) -> Matrix<T> {
        let cols = self.edge_features.cols();
        Matrix::from_fn(self.n_paths, cols, |r, c| self.edge_features[(r, c)])
    }
}

/// `descriptors` is `P×2K`, one row per path in canonical order.
pub fn build_inverse_graph<T: Scalar>(
    layout: &TransducerLayout,
    paths: &PathSet,
    descriptors: &Matrix<T>,
) -> Result<InverseGraph<T>> {
    if paths.n_nodes() != layout.len() {
        return Err(Error::InvalidLayout(format!(
            "path set over {} nodes, layout has {}",
            paths.n_nodes(),
            layout.len()
        )));
    }
    let n_paths = paths.len();
    if descriptors.rows() != n_paths {
        return Err(Error::Data(format!(
            "{} descriptors for {n_paths} measured paths",
            descriptors.rows()
        )));
    }
    if descriptors.cols() % 2 != 0 || descriptors.cols() == 0 {
        return Err(Error::Data(format!(
            "descriptor width {} is not 2K",
            descriptors.cols()
        )));
    }
    let coords = layout.coordinates().to_vec();
    let edges = directed_edges(paths.pairs());
    let width = GEOMETRY_WIDTH + descriptors.cols();
    let mut feats = Matrix::zeros(edges.len(), width);
    for (e, &(src, dst)) in edges.iter().enumerate() {
        let g = geometry_row(&coords, src, dst);
        let row = feats.row_mut(e);
        for (o, v) in row.iter_mut().zip(g) {
            *o = T::lit(v);
        }
        row[GEOMETRY_WIDTH..].copy_from_slice(descriptors.row(e % n_paths));
    }
    Ok(InverseGraph {
        node_coords: coords,
        edges,
        edge_features: feats,
        n_paths,
    })
}

/// Candidate-independent structure of the forward graph, reusable across
/// candidates and able to record the candidate-dependent features on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTopology {
    pub node_coords: Vec<Point>,
    pub edges: Vec<(usize, usize)>,
    pub n_paths: usize,
    /// `2P_f × 3` displacement and length per directed edge.
    pub geometry: Matrix<f64>,
}

impl ForwardTopology {
    pub fn new(layout: &TransducerLayout, fwd_paths: &ForwardPathSet) -> Self {
        let coords = layout.coordinates().to_vec();
        let edges = directed_edges(fwd_paths.pairs());
        let mut geometry = Matrix::zeros(edges.len(), GEOMETRY_WIDTH);
        for (e, &(s, d)) in edges.iter().enumerate() {
            geometry.row_mut(e).copy_from_slice(&geometry_row(&coords, s, d));
        }
        Self {
            node_coords: coords,
            edges,
            n_paths: fwd_paths.len(),
            geometry,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.node_coords.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    fn endpoint_coords<T: Scalar>(&self, source: bool) -> Matrix<T> {
        Matrix::from_fn(self.edges.len(), 2, |e, c| {
            let (s, d) = self.edges[e];
            let node = if source { s } else { d };
            T::lit(self.node_coords[node][c])
        })
    }

    /// Edge features `2P_f × 5` as a differentiable function of the `1×2`
    /// candidate.
    pub fn features_on_tape<'t, T: Scalar>(&self, tape: &'t Tape<T>, candidate: Var<'t, T>) -> Var<'t, T> {
        assert_eq!(candidate.shape(), (1, 2), "candidate must be 1x2");
        let geom = tape.constant(self.geometry.cast());
        let neg_src = tape.constant(self.endpoint_coords::<T>(true).map(|v| -v));
        let neg_dst = tape.constant(self.endpoint_coords::<T>(false).map(|v| -v));
        let to_src = neg_src.add_row(candidate).row_norm();
        let to_dst = neg_dst.add_row(candidate).row_norm();
        Var::concat_cols(&[geom, to_src, to_dst])
    }
}

/// Geometry of the plate-spanning paths re-expressed around one candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardGraph<T> {
    pub node_coords: Vec<Point>,
    pub edges: Vec<(usize, usize)>,
    /// `2P_f × 5`: `[r_dst − r_src, ‖r_dst − r_src‖, ‖p − r_src‖, ‖p − r_dst‖]`.
    pub edge_features: Matrix<T>,
    pub candidate: Point,
    pub n_paths: usize,
}

pub fn build_forward_graph<T: Scalar>(
    layout: &TransducerLayout,
    fwd_paths: &ForwardPathSet,
    candidate: Point,
) -> Result<ForwardGraph<T>> {
    if !candidate.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite candidate {candidate:?}")));
    }
    let topo = ForwardTopology::new(layout, fwd_paths);
    let dist = |n: usize| {
        let r = topo.node_coords[n];
        (candidate[0] - r[0]).hypot(candidate[1] - r[1])
    };
    let feats = Matrix::from_fn(topo.edges.len(), FORWARD_FEATURE_WIDTH, |e, c| {
        let (s, d) = topo.edges[e];
        T::lit(match c {
            0..=2 => topo.geometry[(e, c)],
            3 => dist(s),
            _ => dist(d),
        })
    });
    Ok(ForwardGraph {
        node_coords: topo.node_coords,
        edges: topo.edges,
        edge_features: feats,
        candidate,
        n_paths: topo.n_paths,
    })
}

/// Incoming-edge segment ids (edge → destination node).
pub fn destination_segments(edges: &[(usize, usize)]) -> Rc<[usize]> {
    edges.iter().map(|&(_, d)| d).collect()
}

/// Source node per edge.
pub fn source_indices(edges: &[(usize, usize)]) -> Rc<[usize]> {
    edges.iter().map(|&(s, _)| s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{enumerate_paths, select_forward_paths, LayoutMetadata};

    fn default_layout() -> TransducerLayout {
        LayoutMetadata::default_ogw().layout().unwrap()
    }

    #[test]
    fn inverse_graph_dimensions_and_reciprocity() {
        let layout = default_layout();
        let paths = enumerate_paths(12).unwrap();
        let desc = Matrix::from_fn(66, 512, |r, c| (r * 512 + c) as f64 * 1e-3);
        let g = build_inverse_graph(&layout, &paths, &desc).unwrap();
        assert_eq!(g.n_edges(), 132);
        assert_eq!(g.edge_features.cols(), 515);
        assert_eq!(g.bins(), 256);
        for e in 0..66 {
            let (a, b) = (g.edge_features.row(e), g.edge_features.row(e + 66));
            assert_eq!(g.edges[e], (g.edges[e + 66].1, g.edges[e + 66].0));
            assert_eq!(a[0], -b[0]);
            assert_eq!(a[1], -b[1]);
            assert_eq!(a[2], b[2]);
            assert_eq!(a[3..], b[3..]);
        }
        let mut incoming = [0; 12];
        for &(_, d) in &g.edges {
            incoming[d] += 1;
        }
        assert!(incoming.iter().all(|&c| c == 11));
    }

    #[test]
    fn missing_descriptor_is_a_data_error() {
        let layout = default_layout();
        let paths = enumerate_paths(12).unwrap();
        let desc = Matrix::<f64>::zeros(65, 8);
        assert!(matches!(
            build_inverse_graph(&layout, &paths, &desc),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn coincident_transducers_give_zero_geometry() {
        let layout = TransducerLayout::new(vec![[0.3, 0.3], [0.3, 0.3]], vec![0], vec![1]).unwrap();
        let paths = enumerate_paths(2).unwrap();
        let g = build_inverse_graph(&layout, &paths, &Matrix::<f64>::zeros(1, 4)).unwrap();
        assert!(g.edge_features.row(0)[..3].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_graph_features() {
        let layout = default_layout();
        let fwd = select_forward_paths(&enumerate_paths(12).unwrap(), &layout).unwrap();
        let src_node = fwd.pairs()[0].0;
        let g: ForwardGraph<f64> = build_forward_graph(&layout, &fwd, layout.coordinate(src_node)).unwrap();
        assert_eq!(g.edge_features.shape(), (72, 5));
        for (e, &(s, _)) in g.edges.iter().enumerate() {
            if s == src_node {
                assert_eq!(g.edge_features[(e, 3)], 0.0);
            }
        }
        for e in 0..36 {
            let (a, b) = (g.edge_features.row(e), g.edge_features.row(e + 36));
            assert_eq!([a[0], a[1], a[2], a[3], a[4]], [-b[0], -b[1], b[2], b[4], b[3]]);
        }
        let ud: ForwardGraph<f64> = build_forward_graph(&layout, &fwd, [-0.001, -0.001]).unwrap();
        assert!(ud.edge_features.data().iter().all(|v| v.is_finite()));
        for e in 0..72 {
            assert!(ud.edge_features[(e, 3)] > 0.0 && ud.edge_features[(e, 4)] > 0.0);
        }
        assert!(matches!(
            build_forward_graph::<f64>(&layout, &fwd, [f64::NAN, 0.0]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn tape_features_match_direct_construction() {
        let layout = default_layout();
        let fwd = select_forward_paths(&enumerate_paths(12).unwrap(), &layout).unwrap();
        let topo = ForwardTopology::new(&layout, &fwd);
        let cand = [0.37, 0.61];
        let direct: ForwardGraph<f64> = build_forward_graph(&layout, &fwd, cand).unwrap();
        let tape = Tape::new();
        let p = tape.variable(Matrix::row_vector(cand.to_vec()));
        let f = topo.features_on_tape(&tape, p);
        for (a, b) in f.value().data().iter().zip(direct.edge_features.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        // at a transducer the subgradient is finite
        let tape = Tape::new();
        let p = tape.variable(Matrix::row_vector(layout.coordinate(0).to_vec()));
        let loss = topo.features_on_tape(&tape, p).sum();
        let g = tape.backward(loss);
        assert!(g.get(p).unwrap().is_finite());
    }
}
