//! Surrogate mapping a candidate defect coordinate to the energy deviation of
//! every plate-spanning path.
//!
//! Message passing is edge-centric: each node averages the embeddings of all
//! directed edges incident to it (as source or destination) and adds a
//! coordinate embedding; each edge is then updated from its own state and the
//! two endpoint summaries, residually, followed by layer normalisation.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::geometry::Point;
use crate::graphs::{ForwardGraph, ForwardTopology, FORWARD_FEATURE_WIDTH};
use crate::nn::{Activation, Bound, LayerNorm, Linear, Mlp, ParamStore};
use crate::tensor::Matrix;
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardConfig {
    pub hidden: usize,
    pub layers: usize,
}

impl ForwardConfig {
    pub fn reference() -> Self {
        Self {
            hidden: 128,
            layers: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardModel {
    pub config: ForwardConfig,
    encoder: Mlp,
    node_embed: Linear,
    updates: Vec<Mlp>,
    norms: Vec<LayerNorm>,
    decoder: Mlp,
}

impl ForwardModel {
    pub fn new<T: Scalar>(
        config: ForwardConfig,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if config.hidden == 0 {
            return Err(Error::Config("forward hidden width must be positive".into()));
        }
        let h = config.hidden;
        let encoder = Mlp::new(store, "forward.encoder", &[FORWARD_FEATURE_WIDTH, h, h], Activation::Elu, rng);
        let node_embed = Linear::new(store, "forward.node_embed", 2, h, rng);
        let mut updates = Vec::new();
        let mut norms = Vec::new();
        for l in 0..config.layers {
            updates.push(Mlp::new(store, &format!("forward.mp{l}"), &[3 * h, h, h], Activation::Elu, rng));
            norms.push(LayerNorm::new(store, &format!("forward.norm{l}"), h));
        }
        let decoder = Mlp::new(store, "forward.decoder", &[h, h, 1], Activation::Elu, rng);
        Ok(Self {
            config,
            encoder,
            node_embed,
            updates,
            norms,
            decoder,
        })
    }

    /// `features` is `2P_f × 5` in the directed layout of [`ForwardTopology`];
    /// returns `P_f × 1` non-negative predictions.
    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        topo: &ForwardTopology,
        features: Var<'t, T>,
    ) -> Var<'t, T> {
        let tape = features.tape();
        let n_nodes = topo.n_nodes();
        let n_paths = topo.n_paths;
        let coords = Matrix::from_fn(n_nodes, 2, |r, c| T::lit(topo.node_coords[r][c]));
        let anchors = self.node_embed.forward(p, tape.constant(coords));
        let src: Vec<usize> = topo.edges.iter().map(|e| e.0).collect();
        let dst: Vec<usize> = topo.edges.iter().map(|e| e.1).collect();
        let incidence: Rc<[usize]> = src.iter().chain(&dst).copied().collect();

        let mut u = self.encoder.forward(p, features);
        for (update, norm) in self.updates.iter().zip(&self.norms) {
            let summary = Var::concat_rows(&[u, u])
                .segment_mean(incidence.clone(), n_nodes)
                .add(anchors);
            let msg = Var::concat_cols(&[u, summary.select_rows(&src), summary.select_rows(&dst)]);
            u = norm.forward(p, u.add(update.forward(p, msg)));
        }
        let fwd_dir: Vec<usize> = (0..n_paths).collect();
        let rev_dir: Vec<usize> = (n_paths..2 * n_paths).collect();
        let merged = u
            .select_rows(&fwd_dir)
            .add(u.select_rows(&rev_dir))
            .scale(T::lit(0.5));
        self.decoder.forward(p, merged).softplus()
    }

    /// Predicted energy deviations at `candidate`, evaluation only.
    pub fn predict<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        topo: &ForwardTopology,
        candidate: Point,
    ) -> Result<Vec<T>> {
        if !candidate.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite candidate {candidate:?}")));
        }
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let cand = tape.constant(Matrix::row_vector(vec![T::lit(candidate[0]), T::lit(candidate[1])]));
        let out = self.forward(&p, topo, topo.features_on_tape(&tape, cand));
        Ok(out.value().data().to_vec())
    }

    /// Prediction from a prebuilt forward graph.
    pub fn predict_graph<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        topo: &ForwardTopology,
        graph: &ForwardGraph<T>,
    ) -> Result<Vec<T>> {
        if !graph.edge_features.is_finite() {
            return Err(Error::Numeric("non-finite forward edge features".into()));
        }
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let out = self.forward(&p, topo, tape.constant(graph.edge_features.clone()));
        Ok(out.value().data().to_vec())
    }
}

/// Mean squared mismatch between prediction (`P_f×1`) and an observed target.
pub fn mismatch<'t, T: Scalar>(prediction: Var<'t, T>, observed: &[T]) -> Var<'t, T> {
    let target = prediction
        .tape()
        .constant(Matrix::column_vector(observed.to_vec()));
    prediction.sub(target).square().mean()
}

/// Gradient of the forward mismatch with respect to the candidate, computed
/// on a private tape with the forward parameters held constant.
pub fn coordinate_gradient<T: Scalar>(
    model: &ForwardModel,
    store: &ParamStore<T>,
    topo: &ForwardTopology,
    candidate: [T; 2],
    observed: &[T],
) -> Result<[T; 2]> {
    if observed.len() != topo.n_paths {
        return Err(Error::Data(format!(
            "{} observed deviations for {} forward paths",
            observed.len(),
            topo.n_paths
        )));
    }
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let cand = tape.variable(Matrix::row_vector(candidate.to_vec()));
    let pred = model.forward(&p, topo, topo.features_on_tape(&tape, cand));
    let loss = mismatch(pred, observed);
    let grads = tape.backward(loss);
    let g = grads.get_or_zeros(cand);
    Ok([g[(0, 0)], g[(0, 1)]])
}

/// Mismatch value at a candidate (the scalar differentiated by
/// [`coordinate_gradient`]).
pub fn mismatch_at<T: Scalar>(
    model: &ForwardModel,
    store: &ParamStore<T>,
    topo: &ForwardTopology,
    candidate: [T; 2],
    observed: &[T],
) -> T {
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let cand = tape.constant(Matrix::row_vector(candidate.to_vec()));
    let pred = model.forward(&p, topo, topo.features_on_tape(&tape, cand));
    mismatch(pred, observed).scalar_value()
}
