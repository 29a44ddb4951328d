//! Comparison localisers: a path-axis CNN, a bidirectional LSTM with
//! attention pooling, a mean-aggregation GNN and a plain graph-attention
//! network, all regressing a 2-D coordinate from the same descriptors.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::geometry::Point;
use crate::graphs::{destination_segments, source_indices, InverseGraph};
use crate::nn::{dropout, Activation, AttentionTopology, Bound, GatLayer, LayerNorm, Linear, Mlp, ParamStore};
use crate::tensor::Matrix;
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Cnn1d,
    Lstm,
    GnnMlp,
    Gat,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [Self::Cnn1d, Self::Lstm, Self::GnnMlp, Self::Gat];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cnn1d => "cnn1d",
            Self::Lstm => "lstm",
            Self::GnnMlp => "gnn-mlp",
            Self::Gat => "gat",
        }
    }

    /// Whether the model consumes the graph rather than the path sequence.
    pub fn is_graph(self) -> bool {
        matches!(self, Self::GnnMlp | Self::Gat)
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub cnn_channels: Vec<usize>,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub lstm_dropout: f64,
    pub graph_hidden: usize,
    pub gat_heads: usize,
    pub graph_layers: usize,
    pub gat_dropout: f64,
}

impl BaselineConfig {
    pub fn reference() -> Self {
        Self {
            cnn_channels: vec![16, 32, 64, 128, 256],
            lstm_hidden: 128,
            lstm_layers: 3,
            lstm_dropout: 0.3,
            graph_hidden: 256,
            gat_heads: 16,
            graph_layers: 4,
            gat_dropout: 0.2,
        }
    }
}

/// What a baseline is evaluated on.
#[derive(Clone, Copy, Debug)]
pub enum ModelInput<'a, T> {
    /// `P × (3 + 2K)` path tokens in canonical order.
    Tokens(&'a Matrix<T>),
    Graph(&'a InverseGraph<T>),
}

fn head<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Mlp {
    Mlp::new(store, name, &[d, (d / 2).max(2), (d / 4).max(2), 2], Activation::Relu, rng)
}

#[derive(Clone, Debug)]
pub struct Cnn1d {
    convs: Vec<Linear>,
    head: Mlp,
}

impl Cnn1d {
    fn new<T: Scalar>(store: &mut ParamStore<T>, in_dim: usize, channels: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut convs = Vec::new();
        let mut c_in = in_dim;
        for (b, &c_out) in channels.iter().enumerate() {
            // kernel 3: weights over [x_{t-1}, x_t, x_{t+1}]
            convs.push(Linear::new(store, &format!("cnn.conv{b}"), 3 * c_in, c_out, rng));
            c_in = c_out;
        }
        let head = head(store, "cnn.head", c_in, rng);
        Self { convs, head }
    }

    fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, tokens: Var<'t, T>) -> Var<'t, T> {
        let mut x = tokens;
        for conv in &self.convs {
            let len = x.rows();
            let prev: Rc<[Option<usize>]> = (0..len).map(|t| t.checked_sub(1)).collect();
            let next: Rc<[Option<usize>]> = (0..len).map(|t| (t + 1 < len).then_some(t + 1)).collect();
            let window = Var::concat_cols(&[x.gather_rows(prev), x, x.gather_rows(next)]);
            let y = conv.forward(p, window).relu();
            // max-pool with window 2, a trailing odd row pooled alone
            let seg: Vec<usize> = (0..len).map(|t| t / 2).collect();
            x = y.segment_max(&seg, len.div_ceil(2));
        }
        self.head.forward(p, x.mean_rows())
    }
}

#[derive(Clone, Debug)]
struct LstmCell {
    input: Linear,
    recurrent: String,
    hidden: usize,
}

impl LstmCell {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let input = Linear::new(store, &format!("{name}.input"), in_dim, 4 * hidden, rng);
        let recurrent = format!("{name}.recurrent");
        store.init_weight(&recurrent, hidden, 4 * hidden, rng);
        Self {
            input,
            recurrent,
            hidden,
        }
    }

    /// Runs over the rows of `x` in the given order; returns `L×hidden`
    /// states in the original row order.
    fn run<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>, reverse: bool) -> Var<'t, T> {
        let tape = x.tape();
        let len = x.rows();
        let h_dim = self.hidden;
        let projected = self.input.forward(p, x);
        let u = p.var(&self.recurrent);
        let mut h = tape.constant(Matrix::zeros(1, h_dim));
        let mut c = tape.constant(Matrix::zeros(1, h_dim));
        let mut states = vec![None; len];
        let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
        for t in order {
            let gates = projected.select_rows(&[t]).add(h.matmul(u));
            let i = gates.slice_cols(0, h_dim).sigmoid();
            let f = gates.slice_cols(h_dim, h_dim).sigmoid();
            let g = gates.slice_cols(2 * h_dim, h_dim).tanh();
            let o = gates.slice_cols(3 * h_dim, h_dim).sigmoid();
            c = f.mul(c).add(i.mul(g));
            h = o.mul(c.tanh());
            states[t] = Some(h);
        }
        let rows: Vec<Var<'t, T>> = states.into_iter().map(|s| s.expect("every step visited")).collect();
        Var::concat_rows(&rows)
    }
}

#[derive(Clone, Debug)]
pub struct BiLstm {
    layers: Vec<(LstmCell, LstmCell)>,
    dropout: f64,
    attn: Mlp,
    head: Mlp,
    width: usize,
}

impl BiLstm {
    fn new<T: Scalar>(store: &mut ParamStore<T>, in_dim: usize, cfg: &BaselineConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.lstm_hidden;
        let mut layers = Vec::new();
        let mut d = in_dim;
        for l in 0..cfg.lstm_layers {
            let fwd = LstmCell::new(store, &format!("lstm.l{l}.fwd"), d, h, rng);
            let bwd = LstmCell::new(store, &format!("lstm.l{l}.bwd"), d, h, rng);
            layers.push((fwd, bwd));
            d = 2 * h;
        }
        let attn = Mlp::new(store, "lstm.attn", &[d, h, 1], Activation::Tanh, rng);
        let head = head(store, "lstm.head", d, rng);
        Self {
            layers,
            dropout: cfg.lstm_dropout,
            attn,
            head,
            width: d,
        }
    }

    fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        tokens: Var<'t, T>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Var<'t, T> {
        let mut x = tokens;
        let last = self.layers.len() - 1;
        for (l, (fwd, bwd)) in self.layers.iter().enumerate() {
            x = Var::concat_cols(&[fwd.run(p, x, false), bwd.run(p, x, true)]);
            if l < last {
                x = dropout(x, self.dropout, rng.as_deref_mut());
            }
        }
        let seg: Rc<[usize]> = vec![0; x.rows()].into();
        let weights = self.attn.forward(p, x).segment_softmax(seg.clone(), 1);
        let pooled = x.mul(weights.group_expand(self.width)).segment_sum(seg, 1);
        self.head.forward(p, pooled)
    }
}

fn node_coords<'t, T: Scalar>(tape: &'t Tape<T>, graph: &InverseGraph<T>) -> Var<'t, T> {
    tape.constant(Matrix::from_fn(graph.n_nodes(), 2, |r, c| T::lit(graph.node_coords[r][c])))
}

#[derive(Clone, Debug)]
pub struct GnnMlp {
    edge_encoder: Mlp,
    node_init: Mlp,
    layers: Vec<Linear>,
    head: Mlp,
}

impl GnnMlp {
    fn new<T: Scalar>(store: &mut ParamStore<T>, in_dim: usize, cfg: &BaselineConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.graph_hidden;
        let edge_encoder = Mlp::new(store, "gnn_mlp.edge_encoder", &[in_dim, d, d, d, d], Activation::Relu, rng);
        let node_init = Mlp::new(store, "gnn_mlp.node_init", &[2 + d, d, d], Activation::Relu, rng);
        let layers = (0..cfg.graph_layers)
            .map(|l| Linear::new(store, &format!("gnn_mlp.mp{l}"), 2 * d, d, rng))
            .collect();
        let head = head(store, "gnn_mlp.head", d, rng);
        Self {
            edge_encoder,
            node_init,
            layers,
            head,
        }
    }

    fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, graph: &InverseGraph<T>, features: Var<'t, T>) -> Var<'t, T> {
        let n = graph.n_nodes();
        let dst = destination_segments(&graph.edges);
        let src = source_indices(&graph.edges);
        let edges = self.edge_encoder.forward(p, features).relu();
        let incoming = edges.segment_mean(dst.clone(), n);
        let mut x = self
            .node_init
            .forward(p, Var::concat_cols(&[node_coords(features.tape(), graph), incoming]))
            .relu();
        for layer in &self.layers {
            let agg = x.select_rows(&src).segment_mean(dst.clone(), n);
            x = layer.forward(p, Var::concat_cols(&[x, agg])).relu();
        }
        self.head.forward(p, x.mean_rows())
    }
}

#[derive(Clone, Debug)]
pub struct GatBaseline {
    edge_encoder: Mlp,
    node_init: Mlp,
    attention: Vec<GatLayer>,
    norms: Vec<LayerNorm>,
    query: String,
    dropout: f64,
    head: Mlp,
}

impl GatBaseline {
    fn new<T: Scalar>(store: &mut ParamStore<T>, in_dim: usize, cfg: &BaselineConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.graph_hidden;
        let edge_encoder = Mlp::new(store, "gat.edge_encoder", &[in_dim, d, d, d, d], Activation::Elu, rng);
        let node_init = Mlp::new(store, "gat.node_init", &[2 + d, d, d], Activation::Elu, rng);
        let mut attention = Vec::new();
        let mut norms = Vec::new();
        for l in 0..cfg.graph_layers {
            attention.push(GatLayer::new(store, &format!("gat.gat{l}"), d, cfg.gat_heads, d / cfg.gat_heads, rng));
            norms.push(LayerNorm::new(store, &format!("gat.norm{l}"), d));
        }
        let query = "gat.pool_query".to_string();
        store.init_weight(&query, d, 1, rng);
        let head = head(store, "gat.head", d, rng);
        Self {
            edge_encoder,
            node_init,
            attention,
            norms,
            query,
            dropout: cfg.gat_dropout,
            head,
        }
    }

    fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        graph: &InverseGraph<T>,
        features: Var<'t, T>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Var<'t, T> {
        let n = graph.n_nodes();
        let edges = self.edge_encoder.forward(p, features).elu();
        let incoming = edges.segment_mean(destination_segments(&graph.edges), n);
        let mut x = self
            .node_init
            .forward(p, Var::concat_cols(&[node_coords(features.tape(), graph), incoming]));
        let topo = AttentionTopology::with_self_loops(&graph.edges, n);
        for (layer, norm) in self.attention.iter().zip(&self.norms) {
            let h = layer.forward(p, x, &topo, self.dropout, rng.as_deref_mut());
            x = dropout(norm.forward(p, h).elu(), self.dropout, rng.as_deref_mut());
        }
        let seg: Rc<[usize]> = vec![0; n].into();
        let weights = x.matmul(p.var(&self.query)).segment_softmax(seg.clone(), 1);
        let pooled = x.mul(weights.group_expand(x.cols())).segment_sum(seg, 1);
        self.head.forward(p, pooled)
    }
}

#[derive(Clone, Debug)]
pub enum BaselineModel {
    Cnn1d(Cnn1d),
    Lstm(BiLstm),
    GnnMlp(GnnMlp),
    Gat(GatBaseline),
}

impl BaselineModel {
    /// `in_dim` is the path-token / edge-feature width `3 + 2K`.
    pub fn new<T: Scalar>(
        kind: BaselineKind,
        cfg: &BaselineConfig,
        in_dim: usize,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if kind == BaselineKind::Gat && (cfg.gat_heads == 0 || cfg.graph_hidden % cfg.gat_heads != 0) {
            return Err(Error::Config(format!(
                "graph width {} not divisible by {} heads",
                cfg.graph_hidden, cfg.gat_heads
            )));
        }
        if kind == BaselineKind::Lstm && cfg.lstm_layers == 0 {
            return Err(Error::Config("LSTM needs at least one layer".into()));
        }
        Ok(match kind {
            BaselineKind::Cnn1d => Self::Cnn1d(Cnn1d::new(store, in_dim, &cfg.cnn_channels, rng)),
            BaselineKind::Lstm => Self::Lstm(BiLstm::new(store, in_dim, cfg, rng)),
            BaselineKind::GnnMlp => Self::GnnMlp(GnnMlp::new(store, in_dim, cfg, rng)),
            BaselineKind::Gat => Self::Gat(GatBaseline::new(store, in_dim, cfg, rng)),
        })
    }

    pub fn kind(&self) -> BaselineKind {
        match self {
            Self::Cnn1d(_) => BaselineKind::Cnn1d,
            Self::Lstm(_) => BaselineKind::Lstm,
            Self::GnnMlp(_) => BaselineKind::GnnMlp,
            Self::Gat(_) => BaselineKind::Gat,
        }
    }

    /// Sequence models read only the first (canonical-direction) edge rows.
    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        graph: &InverseGraph<T>,
        features: Var<'t, T>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Var<'t, T> {
        let tokens = || {
            let first: Vec<usize> = (0..graph.n_paths).collect();
            features.select_rows(&first)
        };
        match self {
            Self::Cnn1d(m) => m.forward(p, tokens()),
            Self::Lstm(m) => m.forward(p, tokens(), rng),
            Self::GnnMlp(m) => m.forward(p, graph, features),
            Self::Gat(m) => m.forward(p, graph, features, rng),
        }
    }

    pub fn forward_tokens<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        tokens: Var<'t, T>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'t, T>> {
        match self {
            Self::Cnn1d(m) => Ok(m.forward(p, tokens)),
            Self::Lstm(m) => Ok(m.forward(p, tokens, rng)),
            _ => Err(Error::Config(format!("{} expects a graph input", self.kind()))),
        }
    }
}

/// Evaluation-mode prediction of any baseline on a matching input.
pub fn baseline_predict<T: Scalar>(
    kind: BaselineKind,
    input: ModelInput<'_, T>,
    model: &BaselineModel,
    store: &ParamStore<T>,
) -> Result<Point> {
    if model.kind() != kind {
        return Err(Error::Config(format!(
            "model is {}, requested {kind}",
            model.kind()
        )));
    }
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let out = match (input, kind.is_graph()) {
        (ModelInput::Tokens(t), false) => model.forward_tokens(&p, tape.constant(t.clone()), None)?,
        (ModelInput::Graph(g), true) => model.forward(&p, g, tape.constant(g.edge_features.clone()), None),
        (ModelInput::Tokens(_), true) => {
            return Err(Error::Config(format!("{kind} expects a graph input")))
        }
        (ModelInput::Graph(_), false) => {
            return Err(Error::Config(format!("{kind} expects path tokens")))
        }
    };
    let v = out.value();
    let pt = [v[(0, 0)].to_f64_lossy(), v[(0, 1)].to_f64_lossy()];
    if !pt.iter().all(|x| x.is_finite()) {
        return Err(Error::Numeric(format!("{kind} produced a non-finite prediction")));
    }
    Ok(pt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{enumerate_paths, LayoutMetadata};
    use crate::graphs::build_inverse_graph;
    use rand::{Rng, SeedableRng};

    fn small() -> BaselineConfig {
        BaselineConfig {
            cnn_channels: vec![4, 6, 8, 8, 8],
            lstm_hidden: 5,
            lstm_layers: 2,
            lstm_dropout: 0.3,
            graph_hidden: 8,
            gat_heads: 2,
            graph_layers: 2,
            gat_dropout: 0.2,
        }
    }

    fn graph(rng: &mut ChaCha8Rng) -> InverseGraph<f64> {
        let layout = LayoutMetadata::default_ogw().layout().unwrap();
        let desc = Matrix::from_fn(66, 6, |_, _| rng.random_range(-1.0..1.0));
        build_inverse_graph(&layout, &enumerate_paths(12).unwrap(), &desc).unwrap()
    }

    #[test]
    fn every_kind_outputs_a_finite_coordinate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = graph(&mut rng);
        let tokens = g.path_tokens();
        for kind in BaselineKind::ALL {
            let mut store = ParamStore::new();
            let m = BaselineModel::new(kind, &small(), 9, &mut store, &mut rng).unwrap();
            let input = if kind.is_graph() {
                ModelInput::Graph(&g)
            } else {
                ModelInput::Tokens(&tokens)
            };
            let p = baseline_predict(kind, input, &m, &store).unwrap();
            assert!(p.iter().all(|v| v.is_finite()));
            assert!(store.names().all(|n| !n.starts_with("forward.")));
        }
    }

    #[test]
    fn kind_input_mismatch_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = graph(&mut rng);
        let tokens = g.path_tokens();
        let mut store = ParamStore::new();
        let m = BaselineModel::new(BaselineKind::GnnMlp, &small(), 9, &mut store, &mut rng).unwrap();
        assert!(matches!(
            baseline_predict(BaselineKind::GnnMlp, ModelInput::Tokens(&tokens), &m, &store),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            baseline_predict(BaselineKind::Gat, ModelInput::Graph(&g), &m, &store),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn kind_names_round_trip() {
        for k in BaselineKind::ALL {
            assert_eq!(k.as_str().parse::<BaselineKind>().unwrap(), k);
        }
        assert!("mlp".parse::<BaselineKind>().is_err());
    }
}
