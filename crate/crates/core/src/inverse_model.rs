//! Localisation branch: per-bin attention edge encoder, node initialisation,
//! multi-head neighbour attention stack, max pooling and a coordinate head.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::geometry::Point;
use crate::graphs::{destination_segments, InverseGraph, GEOMETRY_WIDTH};
use crate::nn::{dropout, Activation, AttentionTopology, Bound, GatLayer, LayerNorm, Linear, Mlp, ParamStore};
use crate::tensor::Matrix;
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseConfig {
    /// Spectral bins per path.
    pub bins: usize,
    /// Hidden width of the per-bin scorer and feature map.
    pub token_hidden: usize,
    /// Width of the attended context vector.
    pub context_dim: usize,
    /// Node/edge state width; must be divisible by `heads`.
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl InverseConfig {
    pub fn reference(bins: usize) -> Self {
        Self {
            bins,
            token_hidden: 64,
            context_dim: 64,
            hidden: 256,
            heads: 16,
            layers: 4,
            dropout: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 || self.hidden == 0 || self.heads == 0 || self.layers == 0 {
            return Err(Error::Config("inverse model dimensions must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct InverseModel {
    pub config: InverseConfig,
    bin_scorer: Mlp,
    bin_features: Mlp,
    edge_encoder: Mlp,
    node_embed: Linear,
    node_combine: Mlp,
    attention: Vec<GatLayer>,
    norms: Vec<LayerNorm>,
    head: Mlp,
}

/// Intermediate tensors of one edge encoding, exposed for inspection.
pub struct EdgeEncoding<'t, T> {
    /// `(P·K)×1` attention weight of bin `k` of path `p` at row `p·K + k`.
    pub bin_weights: Var<'t, T>,
    /// `P×context_dim` attended context per measured path.
    pub context: Var<'t, T>,
    /// `2P×hidden` initial directed edge embeddings.
    pub embeddings: Var<'t, T>,
}

impl InverseModel {
    pub fn new<T: Scalar>(
        config: InverseConfig,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.hidden;
        let bin_scorer = Mlp::new(store, "inverse.bin_scorer", &[2, c.token_hidden, 1], Activation::Elu, rng);
        let bin_features = Mlp::new(
            store,
            "inverse.bin_features",
            &[2, c.token_hidden, c.context_dim],
            Activation::Elu,
            rng,
        );
        let edge_encoder = Mlp::new(
            store,
            "inverse.edge_encoder",
            &[c.context_dim + GEOMETRY_WIDTH, d, d],
            Activation::Elu,
            rng,
        );
        let node_embed = Linear::new(store, "inverse.node_embed", 2, d, rng);
        let node_combine = Mlp::new(store, "inverse.node_combine", &[2 * d, d, d], Activation::Elu, rng);
        let mut attention = Vec::new();
        let mut norms = Vec::new();
        for l in 0..c.layers {
            attention.push(GatLayer::new(store, &format!("inverse.gat{l}"), d, c.heads, d / c.heads, rng));
            norms.push(LayerNorm::new(store, &format!("inverse.norm{l}"), d));
        }
        let head = Mlp::new(
            store,
            "inverse.head",
            &[d, (d / 2).max(2), (d / 4).max(2), 2],
            Activation::Elu,
            rng,
        );
        Ok(Self {
            config,
            bin_scorer,
            bin_features,
            edge_encoder,
            node_embed,
            node_combine,
            attention,
            norms,
            head,
        })
    }

    /// Attention over the `K` (amplitude, phase) tokens of each measured path,
    /// followed by the edge encoder on `[context, geometry]` per direction.
    pub fn encode_edges<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        features: Var<'t, T>,
        n_paths: usize,
    ) -> EdgeEncoding<'t, T> {
        let k = self.config.bins;
        let n_edges = features.rows();
        assert_eq!(features.cols(), GEOMETRY_WIDTH + 2 * k, "edge feature width");
        let first: Vec<usize> = (0..n_paths).collect();
        let spectral = features.select_rows(&first);
        let amps = spectral.slice_cols(GEOMETRY_WIDTH, k).reshape(n_paths * k, 1);
        let phases = spectral.slice_cols(GEOMETRY_WIDTH + k, k).reshape(n_paths * k, 1);
        let tokens = Var::concat_cols(&[amps, phases]);
        let seg: Rc<[usize]> = (0..n_paths * k).map(|r| r / k).collect();
        let bin_weights = self
            .bin_scorer
            .forward(p, tokens)
            .segment_softmax(seg.clone(), n_paths);
        let token_feats = self.bin_features.forward(p, tokens);
        let context = token_feats
            .mul(bin_weights.group_expand(self.config.context_dim))
            .segment_sum(seg, n_paths);
        let per_edge: Vec<usize> = (0..n_edges).map(|e| e % n_paths).collect();
        let geometry = features.slice_cols(0, GEOMETRY_WIDTH);
        let embeddings = self
            .edge_encoder
            .forward(p, Var::concat_cols(&[context.select_rows(&per_edge), geometry]));
        EdgeEncoding {
            bin_weights,
            context,
            embeddings,
        }
    }

    /// Combines a coordinate embedding with the mean incoming edge embedding
    /// (zero for nodes without incoming edges).
    pub fn init_nodes<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        graph: &InverseGraph<T>,
        embeddings: Var<'t, T>,
    ) -> Var<'t, T> {
        let tape = embeddings.tape();
        let coords = Matrix::from_fn(graph.n_nodes(), 2, |r, c| T::lit(graph.node_coords[r][c]));
        let embedded = self.node_embed.forward(p, tape.constant(coords));
        let incoming = embeddings.segment_mean(destination_segments(&graph.edges), graph.n_nodes());
        self.node_combine
            .forward(p, Var::concat_cols(&[embedded, incoming]))
    }

    /// `features` is the graph's edge-feature matrix as recorded on the tape
    /// (a constant normally, a variable when probing input sensitivity).
    /// Dropout is active only when `rng` is given.
    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        graph: &InverseGraph<T>,
        features: Var<'t, T>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'t, T>> {
        let enc = self.encode_edges(p, features, graph.n_paths);
        let mut x = self.init_nodes(p, graph, enc.embeddings);
        let topo = AttentionTopology::with_self_loops(&graph.edges, graph.n_nodes());
        let rate = self.config.dropout;
        for (l, (layer, norm)) in self.attention.iter().zip(&self.norms).enumerate() {
            let h = layer.forward(p, x, &topo, rate, rng.as_deref_mut());
            x = dropout(norm.forward(p, h).elu(), rate, rng.as_deref_mut());
            if !x.value().is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite activations after attention layer {l}"
                )));
            }
        }
        let pooled = x.max_rows();
        Ok(self.head.forward(p, pooled))
    }

    /// Evaluation-mode prediction.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, graph: &InverseGraph<T>) -> Result<Point> {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let feats = tape.constant(graph.edge_features.clone());
        let out = self.forward(&p, graph, feats, None)?.value();
        let pt = [out[(0, 0)].to_f64_lossy(), out[(0, 1)].to_f64_lossy()];
        if !pt.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite coordinate prediction".into()));
        }
        Ok(pt)
    }
}
