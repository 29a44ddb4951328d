//! Parameter storage, layer building blocks and optimisation utilities.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::Matrix;
use crate::{Error, Result, Scalar};

/// Named parameter tensors, keyed by module path (e.g. `inverse.gat0.w`).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Matrix<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<T>) {
        let name = name.into();
        assert!(
            !self.params.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.params.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|m| m.data().len()).sum()
    }

    /// Xavier-uniform weight matrix.
    pub fn init_weight(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let m = Matrix::from_fn(fan_in, fan_out, |_, _| {
            T::lit(rng.random_range(-bound..bound))
        });
        self.insert(name, m);
    }

    pub fn init_uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) {
        let m = Matrix::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-bound..bound)));
        self.insert(name, m);
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Matrix::zeros(rows, cols));
    }

    /// Records every parameter on `tape`; frozen stores are recorded as
    /// constants so no gradient can reach them.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.variable(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes and little-endian `f64` values in key order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.params {
            h.update(k.as_bytes());
            h.update((v.rows() as u64).to_le_bytes());
            h.update((v.cols() as u64).to_le_bytes());
            for x in v.data() {
                h.update(x.to_f64_lossy().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Matrix::is_finite)
    }

    pub fn to_record(&self) -> ParamRecord {
        ParamRecord {
            tensors: self
                .params
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        TensorRecord {
                            rows: v.rows(),
                            cols: v.cols(),
                            data: v.data().iter().map(|x| x.to_f64_lossy()).collect(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn from_record(rec: &ParamRecord) -> Result<Self> {
        let mut store = Self::new();
        for (k, t) in &rec.tensors {
            if t.data.len() != t.rows * t.cols {
                return Err(Error::Data(format!("tensor {k} has inconsistent shape")));
            }
            store.insert(
                k.clone(),
                Matrix::from_vec(t.rows, t.cols, t.data.iter().map(|&x| T::lit(x)).collect()),
            );
        }
        Ok(store)
    }
}

/// Serialisable form of a [`ParamStore`].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamRecord {
    pub tensors: BTreeMap<String, TensorRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Parameters of one store recorded on a tape.
pub struct Bound<'t, T> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn var(&self, name: &str) -> Var<'t, T> {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("unknown parameter {name}"),
        }
    }

    /// Gradient per parameter name (zeros where nothing flowed).
    pub fn gradients(&self, grads: &Gradients<T>) -> BTreeMap<String, Matrix<T>> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v)))
            .collect()
    }
}

/// Affine map `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    w: String,
    b: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.init_weight(&w, in_dim, out_dim, rng);
        store.init_zeros(&b, 1, out_dim);
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.matmul(p.var(&self.w)).add_row(p.var(&self.b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Elu,
    Tanh,
}

impl Activation {
    pub fn apply<'t, T: Scalar>(self, x: Var<'t, T>) -> Var<'t, T> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Elu => x.elu(),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Stack of linear layers with an activation between consecutive layers and
/// a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
    act: Activation,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        act: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, act }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, h);
            if i < last {
                h = self.act.apply(h);
            }
        }
        h
    }
}

/// Inverted dropout; identity when `rng` is `None` or `rate == 0`.
pub fn dropout<'t, T: Scalar>(
    x: Var<'t, T>,
    rate: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Var<'t, T> {
    let Some(rng) = rng else { return x };
    if rate <= 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let scale = T::lit(1.0 / keep);
    let (r, c) = x.shape();
    let mask = Matrix::from_fn(r, c, |_, _| {
        if rng.random::<f64>() < keep {
            scale
        } else {
            T::zero()
        }
    });
    x.mask(mask)
}

/// Squared Euclidean distance between two `1×2` rows, as a 1×1 var.
pub fn squared_distance<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
    a.sub(b).square().sum()
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: BTreeMap<String, Matrix<T>>,
    v: BTreeMap<String, Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Matrix<T>>) {
        self.step += 1;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let one = T::one();
        let c1 = T::lit(1.0 - self.beta1.powi(self.step));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Rescales gradients in place so their global L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut BTreeMap<String, Matrix<T>>, max_norm: f64) -> f64 {
    let total: f64 = grads
        .values()
        .map(|g| g.sum_squares().to_f64_lossy())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let s = T::lit(max_norm / (total + 1e-12));
        for g in grads.values_mut() {
            g.scale_inplace(s);
        }
    }
    total
}

/// Multiplicative learning-rate decay after a run of epochs without relative
/// improvement of the monitored metric (minimisation).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlateauDecay {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauDecay {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            threshold: 1e-4,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Feeds one epoch's metric; returns the (possibly reduced) rate.
    pub fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        if metric < self.best * (1.0 - self.threshold) {
            self.best = metric;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

/// Row-wise layer normalisation with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: String,
    bias: String,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gain = format!("{name}.gain");
        let bias = format!("{name}.bias");
        store.insert(gain.clone(), Matrix::filled(1, dim, T::one()));
        store.init_zeros(&bias, 1, dim);
        Self { gain, bias }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.layer_norm(T::lit(1e-5))
            .mul_row(p.var(&self.gain))
            .add_row(p.var(&self.bias))
    }
}

/// Directed edge list used for neighbour attention, with a self-loop per node.
#[derive(Clone, Debug)]
pub struct AttentionTopology {
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    pub n_nodes: usize,
}

impl AttentionTopology {
    pub fn with_self_loops(edges: &[(usize, usize)], n_nodes: usize) -> Self {
        let mut src: Vec<usize> = edges.iter().map(|e| e.0).collect();
        let mut dst: Vec<usize> = edges.iter().map(|e| e.1).collect();
        src.extend(0..n_nodes);
        dst.extend(0..n_nodes);
        Self {
            src: src.into(),
            dst: dst.into(),
            n_nodes,
        }
    }
}

/// Multi-head graph attention layer; heads are concatenated.
#[derive(Clone, Debug)]
pub struct GatLayer {
    w: String,
    att_src: String,
    att_dst: String,
    bias: String,
    pub heads: usize,
    pub head_dim: usize,
}

impl GatLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let out = heads * head_dim;
        let layer = Self {
            w: format!("{name}.w"),
            att_src: format!("{name}.att_src"),
            att_dst: format!("{name}.att_dst"),
            bias: format!("{name}.b"),
            heads,
            head_dim,
        };
        store.init_weight(&layer.w, in_dim, out, rng);
        // one attention vector per head, laid out as a 1×out row
        let bound = (6.0 / (head_dim + 1) as f64).sqrt();
        store.init_uniform(&layer.att_src, 1, out, bound, rng);
        store.init_uniform(&layer.att_dst, 1, out, bound, rng);
        store.init_zeros(&layer.bias, 1, out);
        layer
    }

    pub fn out_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// `x` is `N×in`; returns `N×(heads·head_dim)`. Attention coefficients are
    /// dropped out at `attn_dropout` when `rng` is given.
    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        topo: &AttentionTopology,
        attn_dropout: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Var<'t, T> {
        let wx = x.matmul(p.var(&self.w));
        let s_src = wx.mul_row(p.var(&self.att_src)).group_sum(self.head_dim);
        let s_dst = wx.mul_row(p.var(&self.att_dst)).group_sum(self.head_dim);
        let src: Rc<[Option<usize>]> = topo.src.iter().map(|&i| Some(i)).collect();
        let dst: Rc<[Option<usize>]> = topo.dst.iter().map(|&i| Some(i)).collect();
        let scores = s_src
            .gather_rows(src.clone())
            .add(s_dst.gather_rows(dst))
            .leaky_relu(T::lit(0.2));
        let alpha = scores.segment_softmax(topo.dst.clone(), topo.n_nodes);
        let alpha = dropout(alpha, attn_dropout, rng);
        let messages = wx
            .gather_rows(src)
            .mul(alpha.group_expand(self.head_dim));
        messages
            .segment_sum(topo.dst.clone(), topo.n_nodes)
            .add_row(p.var(&self.bias))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_minimises_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Matrix::row_vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let tape = Tape::new();
            let b = store.bind(&tape, true);
            let loss = b.var("x").square().sum();
            let g = tape.backward(loss);
            let grads = b.gradients(&g);
            opt.step(&mut store, &grads);
        }
        assert!(store.get("x").unwrap().max_abs() < 1e-2);
    }

    #[test]
    fn plateau_decays_after_patience() {
        let mut s = PlateauDecay::new(0.8, 2);
        let mut lr = 1.0;
        lr = s.observe(1.0, lr);
        for _ in 0..2 {
            lr = s.observe(1.0, lr);
            assert_eq!(lr, 1.0);
        }
        lr = s.observe(1.0, lr);
        assert!((lr - 0.8).abs() < 1e-12);
    }

    #[test]
    fn clip_bounds_global_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Matrix::row_vector(vec![30.0f64, 40.0]));
        let before = clip_grad_norm(&mut g, 5.0);
        assert!((before - 50.0).abs() < 1e-12);
        let after = g["a"].sum_squares().sqrt();
        assert!((after - 5.0).abs() < 1e-9);
    }

    #[test]
    fn frozen_binding_yields_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "l", 3, 2, &mut rng);
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let x = tape.variable(Matrix::filled(1, 3, 1.0));
        let y = lin.forward(&b, x).square().sum();
        let g = tape.backward(y);
        for m in b.gradients(&g).values() {
            assert_eq!(m.max_abs(), 0.0);
        }
        assert!(g.get(x).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn record_round_trip_preserves_checksum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f32>::new();
        Mlp::new(&mut store, "m", &[4, 8, 2], Activation::Elu, &mut rng);
        let rec = store.to_record();
        let json = serde_json::to_string(&rec).unwrap();
        let back = ParamStore::<f32>::from_record(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(store.checksum(), back.checksum());
        assert_eq!(store, back);
    }
}
