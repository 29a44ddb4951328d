//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar output walks the record in reverse and
//! returns the gradient of that output with respect to every variable that
//! was created with `requires_grad`. Constants never receive gradients, which
//! is how frozen parameters are expressed.
//!
//! Only the operations the models need are provided; each has an analytic
//! backward rule, and every rule is checked against central differences in
//! the tests at the bottom of this file.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::Matrix;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary<T> {
    Relu,
    Elu,
    LeakyRelu(T),
    Softplus,
    Sigmoid,
    Tanh,
    Exp,
    Square,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Unary(usize, Unary<T>),
    RowNorm(usize),
    LayerNorm {
        x: usize,
        normed: Rc<Matrix<T>>,
        inv_std: Rc<Vec<T>>,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    Gather(usize, Rc<[Option<usize>]>),
    SegmentSum(usize, Rc<[usize]>),
    SegmentMean(usize, Rc<[usize]>, Rc<Vec<usize>>),
    SegmentMax(usize, Rc<Vec<Option<usize>>>),
    SegmentSoftmax(usize, Rc<[usize]>, usize),
    GroupSum(usize, usize),
    GroupExpand(usize, usize),
    SumAll(usize),
    Reshape(usize),
}

struct Node<T> {
    value: Rc<Matrix<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation record for one differentiable computation.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`, or `None` if it does not require gradients or the
    /// output does not depend on it.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Matrix<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, materialising zeros when none flowed.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Matrix<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = var.shape();
                Matrix::zeros(r, c)
            }
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(1024)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Rc<Matrix<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Trainable leaf.
    pub fn variable(&self, value: Matrix<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Matrix<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Gradients of the scalar `output` with respect to all recorded variables.
    pub fn backward(&self, output: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.shape(),
            (1, 1),
            "backward requires a scalar output"
        );
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; output.id + 1];
        grads[output.id] = Some(Matrix::scalar(T::one()));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let val = |i: usize| -> &Matrix<T> { &nodes[i].value };
            let needs = |i: usize| nodes[i].needs_grad;
            let mut acc = |i: usize, delta: Matrix<T>| {
                if !nodes[i].needs_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };

            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if needs(*a) {
                        acc(*a, g.matmul_bt(val(*b)));
                    }
                    if needs(*b) {
                        acc(*b, val(*a).matmul_at(&g));
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    if needs(*b) {
                        acc(*b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        acc(*a, g.zip_map(val(*b), |x, y| x * y));
                    }
                    if needs(*b) {
                        acc(*b, g.zip_map(val(*a), |x, y| x * y));
                    }
                }
                Op::AddRow(a, row) => {
                    acc(*a, g.clone());
                    if needs(*row) {
                        acc(*row, column_sums(&g));
                    }
                }
                Op::MulRow(a, row) => {
                    let rv = val(*row);
                    if needs(*a) {
                        let mut d = g.clone();
                        for r in 0..d.rows() {
                            for (x, &m) in d.row_mut(r).iter_mut().zip(rv.data()) {
                                *x = *x * m;
                            }
                        }
                        acc(*a, d);
                    }
                    if needs(*row) {
                        let av = val(*a);
                        let mut d = Matrix::zeros(1, rv.cols());
                        for r in 0..g.rows() {
                            for ((o, &gv), &x) in
                                d.data_mut().iter_mut().zip(g.row(r)).zip(av.row(r))
                            {
                                *o = *o + gv * x;
                            }
                        }
                        acc(*row, d);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(*a, g.map(|v| v * s));
                }
                Op::AddScalar(a) => acc(*a, g.clone()),
                Op::Unary(a, kind) => {
                    let x = val(*a);
                    let y = &node.value;
                    let d = unary_backward(*kind, x, y, &g);
                    acc(*a, d);
                }
                Op::RowNorm(a) => {
                    let x = val(*a);
                    let n = &node.value;
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let norm = n[(r, 0)];
                        if norm > T::zero() {
                            let gr = g[(r, 0)] / norm;
                            for (o, &xv) in d.row_mut(r).iter_mut().zip(x.row(r)) {
                                *o = gr * xv;
                            }
                        }
                    }
                    acc(*a, d);
                }
                Op::LayerNorm { x, normed, inv_std } => {
                    let cols = normed.cols();
                    let n = T::from_usize_lossy(cols);
                    let mut d = Matrix::zeros(normed.rows(), cols);
                    for r in 0..normed.rows() {
                        let gr = g.row(r);
                        let xr = normed.row(r);
                        let mean_g = gr.iter().fold(T::zero(), |a, &v| a + v) / n;
                        let mean_gx = gr
                            .iter()
                            .zip(xr)
                            .fold(T::zero(), |a, (&gv, &xv)| a + gv * xv)
                            / n;
                        let s = inv_std[r];
                        for ((o, &gv), &xv) in d.row_mut(r).iter_mut().zip(gr).zip(xr) {
                            *o = s * (gv - mean_g - xv * mean_gx);
                        }
                    }
                    acc(*x, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        if needs(p) {
                            let d = Matrix::from_fn(g.rows(), w, |r, c| g[(r, offset + c)]);
                            acc(p, d);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = val(p).rows();
                        if needs(p) {
                            let d = Matrix::from_fn(h, g.cols(), |r, c| g[(offset + r, c)]);
                            acc(p, d);
                        }
                        offset += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let x = val(*a);
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(*a, d);
                }
                Op::Gather(a, idx) => {
                    let x = val(*a);
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    for (r, src) in idx.iter().enumerate() {
                        if let Some(s) = src {
                            for (o, &gv) in d.row_mut(*s).iter_mut().zip(g.row(r)) {
                                *o = *o + gv;
                            }
                        }
                    }
                    acc(*a, d);
                }
                Op::SegmentSum(a, seg) => {
                    let x = val(*a);
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    for (r, &s) in seg.iter().enumerate() {
                        d.row_mut(r).copy_from_slice(g.row(s));
                    }
                    acc(*a, d);
                }
                Op::SegmentMean(a, seg, counts) => {
                    let x = val(*a);
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    for (r, &s) in seg.iter().enumerate() {
                        let inv = T::one() / T::from_usize_lossy(counts[s]);
                        for (o, &gv) in d.row_mut(r).iter_mut().zip(g.row(s)) {
                            *o = gv * inv;
                        }
                    }
                    acc(*a, d);
                }
                Op::SegmentMax(a, argmax) => {
                    let x = val(*a);
                    let cols = x.cols();
                    let mut d = Matrix::zeros(x.rows(), cols);
                    for (slot, src) in argmax.iter().enumerate() {
                        if let Some(r) = src {
                            let (s, c) = (slot / cols, slot % cols);
                            d[(*r, c)] = d[(*r, c)] + g[(s, c)];
                        }
                    }
                    acc(*a, d);
                }
                Op::SegmentSoftmax(a, seg, n_seg) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut dots = Matrix::<T>::zeros(*n_seg, cols);
                    for (r, &s) in seg.iter().enumerate() {
                        for c in 0..cols {
                            dots[(s, c)] = dots[(s, c)] + g[(r, c)] * y[(r, c)];
                        }
                    }
                    let mut d = Matrix::zeros(y.rows(), cols);
                    for (r, &s) in seg.iter().enumerate() {
                        for c in 0..cols {
                            d[(r, c)] = y[(r, c)] * (g[(r, c)] - dots[(s, c)]);
                        }
                    }
                    acc(*a, d);
                }
                Op::GroupSum(a, group) => {
                    let x = val(*a);
                    let d = Matrix::from_fn(x.rows(), x.cols(), |r, c| g[(r, c / group)]);
                    acc(*a, d);
                }
                Op::GroupExpand(a, group) => {
                    let x = val(*a);
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            d[(r, c / group)] = d[(r, c / group)] + g[(r, c)];
                        }
                    }
                    acc(*a, d);
                }
                Op::SumAll(a) => {
                    let x = val(*a);
                    acc(*a, Matrix::filled(x.rows(), x.cols(), g[(0, 0)]));
                }
                Op::Reshape(a) => {
                    let x = val(*a);
                    acc(*a, g.clone().reshaped(x.rows(), x.cols()));
                }
            }
        }
        Gradients { grads }
    }
}

fn column_sums<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(m.row(r)) {
            *o = *o + v;
        }
    }
    out
}

fn unary_forward<T: Scalar>(kind: Unary<T>, x: T) -> T {
    match kind {
        Unary::Relu => x.max(T::zero()),
        Unary::Elu => {
            if x > T::zero() {
                x
            } else {
                x.exp_m1()
            }
        }
        Unary::LeakyRelu(slope) => {
            if x > T::zero() {
                x
            } else {
                slope * x
            }
        }
        Unary::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Exp => x.exp(),
        Unary::Square => x * x,
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn unary_backward<T: Scalar>(
    kind: Unary<T>,
    x: &Matrix<T>,
    y: &Matrix<T>,
    g: &Matrix<T>,
) -> Matrix<T> {
    let one = T::one();
    let deriv = |xv: T, yv: T| -> T {
        match kind {
            Unary::Relu => {
                if xv > T::zero() {
                    one
                } else {
                    T::zero()
                }
            }
            Unary::Elu => {
                if xv > T::zero() {
                    one
                } else {
                    yv + one
                }
            }
            Unary::LeakyRelu(slope) => {
                if xv > T::zero() {
                    one
                } else {
                    slope
                }
            }
            Unary::Softplus => sigmoid(xv),
            Unary::Sigmoid => yv * (one - yv),
            Unary::Tanh => one - yv * yv,
            Unary::Exp => yv,
            Unary::Square => xv + xv,
        }
    };
    let data = g
        .data()
        .iter()
        .zip(x.data())
        .zip(y.data())
        .map(|((&gv, &xv), &yv)| gv * deriv(xv, yv))
        .collect();
    Matrix::from_vec(g.rows(), g.cols(), data)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Snapshot of the forward value.
    pub fn value(&self) -> Rc<Matrix<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    /// The single entry of a 1×1 value.
    pub fn scalar_value(&self) -> T {
        let v = self.value();
        assert_eq!(v.shape(), (1, 1));
        v[(0, 0)]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars on different tapes");
    }

    fn push(&self, value: Matrix<T>, op: Op<T>, parents: &[usize]) -> Var<'t, T> {
        let needs = parents.iter().any(|&p| self.tape.needs(p));
        self.tape.push(value, op, needs)
    }

    pub fn matmul(&self, other: Var<'t, T>) -> Var<'t, T> {
        self.same_tape(&other);
        let v = self.value().matmul(&other.value());
        self.push(v, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    pub fn add(&self, other: Var<'t, T>) -> Var<'t, T> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.push(v, Op::Add(self.id, other.id), &[self.id, other.id])
    }

    pub fn sub(&self, other: Var<'t, T>) -> Var<'t, T> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.push(v, Op::Sub(self.id, other.id), &[self.id, other.id])
    }

    pub fn mul(&self, other: Var<'t, T>) -> Var<'t, T> {
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.push(v, Op::Mul(self.id, other.id), &[self.id, other.id])
    }

    /// Adds a `1×C` row to every row of `self`.
    pub fn add_row(&self, row: Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let rv = row.value();
        assert_eq!(rv.rows(), 1);
        assert_eq!(rv.cols(), x.cols(), "add_row width mismatch");
        let mut v = (*x).clone();
        for r in 0..v.rows() {
            for (o, &b) in v.row_mut(r).iter_mut().zip(rv.data()) {
                *o = *o + b;
            }
        }
        self.push(v, Op::AddRow(self.id, row.id), &[self.id, row.id])
    }

    /// Multiplies every row of `self` element-wise by a `1×C` row.
    pub fn mul_row(&self, row: Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let rv = row.value();
        assert_eq!(rv.rows(), 1);
        assert_eq!(rv.cols(), x.cols(), "mul_row width mismatch");
        let mut v = (*x).clone();
        for r in 0..v.rows() {
            for (o, &b) in v.row_mut(r).iter_mut().zip(rv.data()) {
                *o = *o * b;
            }
        }
        self.push(v, Op::MulRow(self.id, row.id), &[self.id, row.id])
    }

    pub fn scale(&self, s: T) -> Var<'t, T> {
        let v = self.value().map(|a| a * s);
        self.push(v, Op::Scale(self.id, s), &[self.id])
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub fn add_scalar(&self, s: T) -> Var<'t, T> {
        let v = self.value().map(|a| a + s);
        self.push(v, Op::AddScalar(self.id), &[self.id])
    }

    fn unary(&self, kind: Unary<T>) -> Var<'t, T> {
        let v = self.value().map(|a| unary_forward(kind, a));
        self.push(v, Op::Unary(self.id, kind), &[self.id])
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(Unary::Relu)
    }

    pub fn elu(&self) -> Var<'t, T> {
        self.unary(Unary::Elu)
    }

    pub fn leaky_relu(&self, slope: T) -> Var<'t, T> {
        self.unary(Unary::LeakyRelu(slope))
    }

    pub fn softplus(&self) -> Var<'t, T> {
        self.unary(Unary::Softplus)
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(Unary::Sigmoid)
    }

    pub fn tanh(&self) -> Var<'t, T> {
        self.unary(Unary::Tanh)
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(Unary::Exp)
    }

    pub fn square(&self) -> Var<'t, T> {
        self.unary(Unary::Square)
    }

    /// Euclidean norm of each row, shape `R×1`. The gradient at a zero row is
    /// defined as zero.
    pub fn row_norm(&self) -> Var<'t, T> {
        let x = self.value();
        let data = (0..x.rows())
            .map(|r| x.row(r).iter().fold(T::zero(), |a, &v| a + v * v).sqrt())
            .collect();
        self.push(
            Matrix::column_vector(data),
            Op::RowNorm(self.id),
            &[self.id],
        )
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, eps: T) -> Var<'t, T> {
        let x = self.value();
        let n = T::from_usize_lossy(x.cols());
        let mut normed = Matrix::zeros(x.rows(), x.cols());
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / n;
            let s = T::one() / (var + eps).sqrt();
            inv_std.push(s);
            for (o, &v) in normed.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let normed = Rc::new(normed);
        self.push(
            (*normed).clone(),
            Op::LayerNorm {
                x: self.id,
                normed,
                inv_std: Rc::new(inv_std),
            },
            &[self.id],
        )
    }

    pub fn concat_cols(parts: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!parts.is_empty());
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].rows();
        assert!(values.iter().all(|v| v.rows() == rows), "concat_cols rows");
        let cols: usize = values.iter().map(|v| v.cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for v in &values {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
                off += v.cols();
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        parts[0].push(out, Op::ConcatCols(ids.clone()), &ids)
    }

    pub fn concat_rows(parts: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!parts.is_empty());
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let cols = values[0].cols();
        assert!(values.iter().all(|v| v.cols() == cols), "concat_rows cols");
        let mut data = Vec::new();
        for v in &values {
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / cols.max(1);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        parts[0].push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(ids.clone()),
            &ids,
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var<'t, T> {
        let x = self.value();
        assert!(start + len <= x.cols());
        let v = Matrix::from_fn(x.rows(), len, |r, c| x[(r, start + c)]);
        self.push(v, Op::SliceCols(self.id, start), &[self.id])
    }

    /// Row gather; `None` yields a zero row.
    pub fn gather_rows(&self, idx: Rc<[Option<usize>]>) -> Var<'t, T> {
        let x = self.value();
        let mut v = Matrix::zeros(idx.len(), x.cols());
        for (r, src) in idx.iter().enumerate() {
            if let Some(s) = src {
                v.row_mut(r).copy_from_slice(x.row(*s));
            }
        }
        self.push(v, Op::Gather(self.id, idx), &[self.id])
    }

    /// Convenience wrapper over [`Var::gather_rows`] for dense indices.
    pub fn select_rows(&self, idx: &[usize]) -> Var<'t, T> {
        let idx: Rc<[Option<usize>]> = idx.iter().map(|&i| Some(i)).collect();
        self.gather_rows(idx)
    }

    /// Sums rows sharing a segment id into `n_seg` output rows.
    pub fn segment_sum(&self, seg: Rc<[usize]>, n_seg: usize) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(seg.len(), x.rows());
        let mut v = Matrix::zeros(n_seg, x.cols());
        for (r, &s) in seg.iter().enumerate() {
            for (o, &xv) in v.row_mut(s).iter_mut().zip(x.row(r)) {
                *o = *o + xv;
            }
        }
        self.push(v, Op::SegmentSum(self.id, seg), &[self.id])
    }

    /// Mean of rows per segment; empty segments give zero rows.
    pub fn segment_mean(&self, seg: Rc<[usize]>, n_seg: usize) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(seg.len(), x.rows());
        let mut counts = vec![0usize; n_seg];
        for &s in seg.iter() {
            counts[s] += 1;
        }
        let mut v = Matrix::zeros(n_seg, x.cols());
        for (r, &s) in seg.iter().enumerate() {
            for (o, &xv) in v.row_mut(s).iter_mut().zip(x.row(r)) {
                *o = *o + xv;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 0 {
                let inv = T::one() / T::from_usize_lossy(c);
                for o in v.row_mut(s) {
                    *o = *o * inv;
                }
            }
        }
        self.push(
            v,
            Op::SegmentMean(self.id, seg, Rc::new(counts)),
            &[self.id],
        )
    }

    /// Column-wise maximum per segment; empty segments give zero rows.
    pub fn segment_max(&self, seg: &[usize], n_seg: usize) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(seg.len(), x.rows());
        let cols = x.cols();
        let mut argmax: Vec<Option<usize>> = vec![None; n_seg * cols];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..cols {
                let slot = &mut argmax[s * cols + c];
                match slot {
                    Some(best) if x[(*best, c)] >= x[(r, c)] => {}
                    _ => *slot = Some(r),
                }
            }
        }
        let v = Matrix::from_fn(n_seg, cols, |s, c| {
            argmax[s * cols + c].map_or(T::zero(), |r| x[(r, c)])
        });
        self.push(v, Op::SegmentMax(self.id, Rc::new(argmax)), &[self.id])
    }

    /// Column-wise max over all rows, shape `1×C`.
    pub fn max_rows(&self) -> Var<'t, T> {
        let seg = vec![0usize; self.rows()];
        self.segment_max(&seg, 1)
    }

    /// Column-wise mean over all rows, shape `1×C`.
    pub fn mean_rows(&self) -> Var<'t, T> {
        let seg: Rc<[usize]> = vec![0usize; self.rows()].into();
        self.segment_mean(seg, 1)
    }

    /// Softmax over the rows of each segment, independently per column.
    pub fn segment_softmax(&self, seg: Rc<[usize]>, n_seg: usize) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(seg.len(), x.rows());
        let cols = x.cols();
        let mut maxes = Matrix::filled(n_seg, cols, T::neg_infinity());
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..cols {
                maxes[(s, c)] = maxes[(s, c)].max(x[(r, c)]);
            }
        }
        let mut v = Matrix::zeros(x.rows(), cols);
        let mut sums = Matrix::zeros(n_seg, cols);
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..cols {
                let e = (x[(r, c)] - maxes[(s, c)]).exp();
                v[(r, c)] = e;
                sums[(s, c)] = sums[(s, c)] + e;
            }
        }
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..cols {
                v[(r, c)] = v[(r, c)] / sums[(s, c)];
            }
        }
        self.push(v, Op::SegmentSoftmax(self.id, seg, n_seg), &[self.id])
    }

    /// Sums consecutive groups of `group` columns: `R×(H·G) → R×H`.
    pub fn group_sum(&self, group: usize) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(x.cols() % group, 0);
        let mut v = Matrix::zeros(x.rows(), x.cols() / group);
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                v[(r, c / group)] = v[(r, c / group)] + x[(r, c)];
            }
        }
        self.push(v, Op::GroupSum(self.id, group), &[self.id])
    }

    /// Repeats each column `group` times: `R×H → R×(H·G)`.
    pub fn group_expand(&self, group: usize) -> Var<'t, T> {
        let x = self.value();
        let v = Matrix::from_fn(x.rows(), x.cols() * group, |r, c| x[(r, c / group)]);
        self.push(v, Op::GroupExpand(self.id, group), &[self.id])
    }

    pub fn sum(&self) -> Var<'t, T> {
        let v = Matrix::scalar(self.value().sum());
        self.push(v, Op::SumAll(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t, T> {
        let (r, c) = self.shape();
        self.sum().scale(T::one() / T::from_usize_lossy(r * c))
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Var<'t, T> {
        let v = (*self.value()).clone().reshaped(rows, cols);
        self.push(v, Op::Reshape(self.id), &[self.id])
    }

    /// Element-wise product with a fixed mask (dropout and similar).
    pub fn mask(&self, mask: Matrix<T>) -> Var<'t, T> {
        let m = self.tape.constant(mask);
        self.mul(m)
    }
}
