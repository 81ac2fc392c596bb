//! Reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Graph`] records operations on [`Var`] handles as they are evaluated.
//! Trainable tensors live in a [`ParamStore`] and enter a graph through
//! [`Graph::param`] without being copied. [`Graph::backward`] walks the tape
//! in reverse and returns [`Gradients`] keyed by [`ParamId`].
//!
//! Every value is a 2-D `f64` matrix; vectors are `1 × n` rows and scalars
//! are `1 × 1`.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Append every tensor from `other`, prefixing names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) -> Vec<ParamId> {
        other
            .names
            .iter()
            .zip(&other.values)
            .map(|(n, v)| self.add(format!("{prefix}{n}"), v.clone()))
            .collect()
    }

    /// Bit-exact equality on every tensor.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.values.iter().zip(&other.values).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Gradients for the parameters of one store. Entries for parameters that
/// did not take part in a computation are `None`.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(|g| g.is_none())
    }

    fn slot(&mut self, id: ParamId, shape: (usize, usize)) -> &mut Mat {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0].get_or_insert_with(|| Mat::zeros(shape))
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Mat) {
        let slot = self.slot(id, g.dim());
        *slot += g;
    }

    /// Element-wise sum of another gradient set into this one.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so that the global norm does not exceed `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    /// Drop gradients for parameters not selected by `keep`.
    pub fn retain(&mut self, keep: impl Fn(ParamId) -> bool) {
        for (i, g) in self.grads.iter_mut().enumerate() {
            if !keep(ParamId(i)) {
                *g = None;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }

    pub fn set(&mut self, id: ParamId, g: Mat) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0] = Some(g);
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Mat),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
    GroupedRowDot(Var, Var, usize),
    WeightedSum(Vec<Var>, Var),
    Sum(Var),
}

struct Node {
    value: Option<Mat>,
    op: Op,
    requires_grad: bool,
}

/// One forward computation.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    frozen: Option<&'a dyn Fn(ParamId) -> bool>,
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax. Entries equal to `-inf` get probability zero.
pub fn softmax_rows(x: ArrayView2<f64>) -> Mat {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        row.mapv_inplace(|v| (v - max).exp());
        let z: f64 = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

fn check_same(a: &Mat, b: &Mat, what: &str) {
    assert_eq!(a.dim(), b.dim(), "{what}: shape mismatch");
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::with_capacity(256),
            frozen: None,
        }
    }

    /// Treat parameters selected by `frozen` as constants: no gradient is
    /// propagated into them.
    pub fn with_frozen(store: &'a ParamStore, frozen: &'a dyn Fn(ParamId) -> bool) -> Self {
        Graph {
            store,
            nodes: Vec::with_capacity(256),
            frozen: Some(frozen),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "not a scalar");
        m[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Const,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let requires_grad = !self.frozen.is_some_and(|f| f(id));
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        check_same(self.value(a), self.value(b), "add");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    /// Add a `1 × m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ra, ca) = self.shape(a);
        assert_eq!(self.shape(row), (1, ca), "add_row: expected 1x{ca}");
        let _ = ra;
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        check_same(self.value(a), self.value(b), "mul");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// Element-wise product with a constant mask (dropout).
    pub fn mul_const(&mut self, a: Var, c: Mat) -> Var {
        check_same(self.value(a), &c, "mul_const");
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, c), &[a])
    }

    /// Multiply by a `1 × 1` node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let v = self.value(a) * k;
        self.push(v, Op::MulScalar(a, s), &[a, s])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    /// Row-wise softmax; `-inf` entries receive zero probability.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a).view());
        self.push(v, Op::Softmax(a), &[a])
    }

    /// Add a constant (e.g. an attention mask of zeros and `-inf`).
    pub fn add_const(&mut self, a: Var, c: Mat) -> Var {
        let c = self.constant(c);
        self.add(a, c)
    }

    /// Row-wise layer normalization with `1 × m` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, m) = xv.dim();
        let mut xhat = Mat::zeros((n, m));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * is;
            }
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Select rows by index (embedding lookup when `a` is a parameter).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let n = av.nrows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("row index {bad} out of range for {n} rows")));
        }
        let v = av.select(Axis(0), idx);
        Ok(self.push(v, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start, end), &[a])
    }

    /// Mean cross-entropy of row-wise softmax against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = lv.dim();
        if n != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: {n} rows but {} targets",
                targets.len()
            )));
        }
        if n == 0 {
            return Err(Error::invalid("cross_entropy over zero rows"));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Shape(format!("target {t} out of range for {c} classes")));
        }
        let probs = softmax_rows(lv.view());
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        let v = Mat::from_elem((1, 1), loss / n as f64);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// For `a` of shape `n × (g·k)` and `b` of shape `n × k`:
    /// `out[i][r] = Σ_c a[i][r·k + c] · b[i][c]`.
    pub fn grouped_row_dot(&mut self, a: Var, b: Var, groups: usize) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (n, k) = bv.dim();
        assert_eq!(av.dim(), (n, groups * k), "grouped_row_dot shapes");
        let mut out = Mat::zeros((n, groups));
        for i in 0..n {
            for r in 0..groups {
                let mut acc = 0.0;
                for c in 0..k {
                    acc += av[[i, r * k + c]] * bv[[i, c]];
                }
                out[[i, r]] = acc;
            }
        }
        self.push(out, Op::GroupedRowDot(a, b, groups), &[a, b])
    }

    /// `Σ_j w[0][j] · parts[j]` for a `1 × k` weight row.
    pub fn weighted_sum(&mut self, parts: &[Var], weights: Var) -> Var {
        let w = self.value(weights);
        assert_eq!(w.dim(), (1, parts.len()), "weighted_sum weights");
        let shape = self.shape(parts[0]);
        let mut out = Mat::zeros(shape);
        for (j, &p) in parts.iter().enumerate() {
            let pv = self.value(p);
            assert_eq!(pv.dim(), shape, "weighted_sum part shapes");
            out.scaled_add(w[[0, j]], pv);
        }
        let mut inputs = parts.to_vec();
        inputs.push(weights);
        self.push(out, Op::WeightedSum(parts.to_vec(), weights), &inputs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    /// Back-propagate from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));
        let mut out = Gradients::zeros_like(self.store);

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let needs = |v: &Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Const => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    if needs(a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if needs(b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if needs(a) {
                        acc(&mut grads, *a, g.dot(self.value(*b)));
                    }
                    if needs(b) {
                        acc(&mut grads, *b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    if needs(a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if needs(b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if needs(row) {
                        acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if needs(a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(a) {
                        acc(&mut grads, *a, &g * self.value(*b));
                    }
                    if needs(b) {
                        acc(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::MulConst(a, c) => acc(&mut grads, *a, &g * c),
                Op::MulScalar(a, s) => {
                    if needs(s) {
                        let d = (&g * self.value(*a)).sum();
                        acc(&mut grads, *s, Mat::from_elem((1, 1), d));
                    }
                    if needs(a) {
                        acc(&mut grads, *a, &g * self.scalar(*s));
                    }
                }
                Op::Scale(a, k) => acc(&mut grads, *a, &g * *k),
                Op::Tanh(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut d = g;
                    Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                    acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut d = g;
                    Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (1.0 - y));
                    acc(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(x)
                        .for_each(|d, &x| *d = if x > 0.0 { *d } else { 0.0 });
                    acc(&mut grads, *a, d);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut d = g;
                    Zip::from(&mut d).and(x).for_each(|d, &x| *d *= gelu_grad(x));
                    acc(&mut grads, *a, d);
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut d = Mat::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|j| g[[i, j]] * y[[i, j]]).sum();
                        for j in 0..y.ncols() {
                            d[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    if needs(bias) {
                        acc(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if needs(gain) {
                        acc(
                            &mut grads,
                            *gain,
                            (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                        );
                    }
                    if needs(x) {
                        let gv = self.value(*gain);
                        let (n, m) = g.dim();
                        let mut dx = Mat::zeros((n, m));
                        for i in 0..n {
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for j in 0..m {
                                let dh = g[[i, j]] * gv[[0, j]];
                                sum_d += dh;
                                sum_dx += dh * xhat[[i, j]];
                            }
                            let mf = m as f64;
                            for j in 0..m {
                                let dh = g[[i, j]] * gv[[0, j]];
                                dx[[i, j]] =
                                    inv_std[i] / mf * (mf * dh - sum_d - xhat[[i, j]] * sum_dx);
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::GatherRows(a, idx) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = d.row_mut(i);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        if needs(p) {
                            acc(&mut grads, *p, g.slice(s![.., off..off + w]).to_owned());
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        if needs(p) {
                            acc(&mut grads, *p, g.slice(s![off..off + h, ..]).to_owned());
                        }
                        off += h;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    d.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::SliceRows(a, start, end) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    d.slice_mut(s![*start..*end, ..]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let n = targets.len() as f64;
                    let mut d = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        d[[i, t]] -= 1.0;
                    }
                    d *= g[[0, 0]] / n;
                    acc(&mut grads, *logits, d);
                }
                Op::GroupedRowDot(a, b, groups) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (n, k) = bv.dim();
                    if needs(a) {
                        let mut da = Mat::zeros(av.dim());
                        for i in 0..n {
                            for r in 0..*groups {
                                for c in 0..k {
                                    da[[i, r * k + c]] = g[[i, r]] * bv[[i, c]];
                                }
                            }
                        }
                        acc(&mut grads, *a, da);
                    }
                    if needs(b) {
                        let mut db = Mat::zeros(bv.dim());
                        for i in 0..n {
                            for r in 0..*groups {
                                for c in 0..k {
                                    db[[i, c]] += g[[i, r]] * av[[i, r * k + c]];
                                }
                            }
                        }
                        acc(&mut grads, *b, db);
                    }
                }
                Op::WeightedSum(parts, weights) => {
                    let w = self.value(*weights).clone();
                    if needs(weights) {
                        let mut dw = Mat::zeros((1, parts.len()));
                        for (j, p) in parts.iter().enumerate() {
                            dw[[0, j]] = (&g * self.value(*p)).sum();
                        }
                        acc(&mut grads, *weights, dw);
                    }
                    for (j, p) in parts.iter().enumerate() {
                        if needs(p) {
                            acc(&mut grads, *p, &g * w[[0, j]]);
                        }
                    }
                }
                Op::Sum(a) => {
                    let d = Mat::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(&mut grads, *a, d);
                }
            }
        }
        out
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Worst relative error between analytic gradients and central finite
    /// differences over every scalar of every parameter. The denominator is
    /// floored at 1e-6 so vanishing gradients are compared absolutely.
    pub fn max_rel_error<F>(store: &ParamStore, loss: F, h: f64) -> f64
    where
        F: Fn(&ParamStore) -> (f64, Gradients),
    {
        let (_, analytic) = loss(store);
        let mut worst: f64 = 0.0;
        let mut probe = store.clone();
        for id in store.ids() {
            let shape = store.get(id).dim();
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let orig = probe.get(id)[[i, j]];
                    probe.get_mut(id)[[i, j]] = orig + h;
                    let (lp, _) = loss(&probe);
                    probe.get_mut(id)[[i, j]] = orig - h;
                    let (lm, _) = loss(&probe);
                    probe.get_mut(id)[[i, j]] = orig;
                    let numeric = (lp - lm) / (2.0 * h);
                    let a = analytic.get(id).map_or(0.0, |g| g[[i, j]]);
                    let denom = (a.abs() + numeric.abs()).max(1e-6);
                    worst = worst.max((a - numeric).abs() / denom);
                }
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::testing::max_rel_error;
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn random_store(shapes: &[(&str, (usize, usize))], seed: u64) -> ParamStore {
        let mut r = crate::rng::rng(seed);
        let mut store = ParamStore::new();
        for (name, shape) in shapes {
            let m = Mat::from_shape_fn(*shape, |_| r.random_range(-1.0..1.0));
            store.add(*name, m);
        }
        store
    }

    #[test]
    fn matmul_and_bias_gradients() {
        let store = random_store(&[("x", (3, 4)), ("w", (4, 2)), ("b", (1, 2))], 1);
        let err = max_rel_error(
            &store,
            |s| {
                let mut g = Graph::new(s);
                let x = g.param(ParamId(0));
                let w = g.param(ParamId(1));
                let b = g.param(ParamId(2));
                let y = g.matmul(x, w);
                let y = g.add_row(y, b);
                let y = g.tanh(y);
                let l = g.sum(y);
                (g.scalar(l), g.backward(l))
            },
            1e-5,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn nonlinearity_and_norm_gradients() {
        let store = random_store(
            &[("x", (3, 5)), ("gain", (1, 5)), ("bias", (1, 5)), ("w", (5, 5))],
            2,
        );
        let err = max_rel_error(
            &store,
            |s| {
                let mut g = Graph::new(s);
                let x = g.param(ParamId(0));
                let ga = g.param(ParamId(1));
                let bi = g.param(ParamId(2));
                let w = g.param(ParamId(3));
                let h = g.layer_norm(x, ga, bi);
                let h = g.gelu(h);
                let a = g.matmul_t(h, w);
                let a = g.softmax(a);
                let s1 = g.sigmoid(a);
                let t = g.transpose(s1);
                let t = g.slice_rows(t, 1, 4);
                let l = g.cross_entropy(t, &[0, 2, 1]).unwrap();
                (g.scalar(l), g.backward(l))
            },
            1e-5,
        );
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn structural_op_gradients() {
        let store = random_store(
            &[("a", (3, 6)), ("b", (3, 2)), ("e", (5, 2)), ("w", (1, 3)), ("s", (1, 1))],
            3,
        );
        let err = max_rel_error(
            &store,
            |s| {
                let mut g = Graph::new(s);
                let a = g.param(ParamId(0));
                let b = g.param(ParamId(1));
                let e = g.param(ParamId(2));
                let w = g.param(ParamId(3));
                let sc = g.param(ParamId(4));
                let rows = g.gather_rows(e, &[4, 0, 4]).unwrap();
                let d = g.grouped_row_dot(a, b, 3);
                let c = g.concat_cols(&[rows, b]);
                let c = g.slice_cols(c, 1, 4);
                let cc = g.concat_rows(&[c, d]);
                let p1 = g.slice_rows(cc, 0, 3);
                let p2 = g.slice_rows(cc, 3, 6);
                let p3 = g.mul(p1, p2);
                let ws = g.softmax(w);
                let m = g.weighted_sum(&[p1, p2, p3], ws);
                let m = g.mul_scalar(m, sc);
                let m = g.relu(m);
                let m = g.mul_const(m, Mat::from_elem((3, 3), 0.5));
                let m = g.scale(m, 3.0);
                let l = g.sum(m);
                (g.scalar(l), g.backward(l))
            },
            1e-6,
        );
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn cross_entropy_two_class_value() {
        let mut store = ParamStore::new();
        store.add("l", array![[2.0, 0.0]]);
        let mut g = Graph::new(&store);
        let l = g.param(ParamId(0));
        let loss = g.cross_entropy(l, &[0]).unwrap();
        assert!((g.scalar(loss) - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let store = random_store(&[("a", (2, 2)), ("b", (2, 2))], 4);
        let frozen = |id: ParamId| id == ParamId(0);
        let mut g = Graph::with_frozen(&store, &frozen);
        let a = g.param(ParamId(0));
        let b = g.param(ParamId(1));
        let c = g.matmul(a, b);
        let l = g.sum(c);
        let grads = g.backward(l);
        assert!(grads.get(ParamId(0)).is_none());
        assert!(grads.get(ParamId(1)).is_some());
    }

    #[test]
    fn softmax_masks_neg_infinity() {
        let m = array![[0.0, f64::NEG_INFINITY, 0.0]];
        let p = softmax_rows(m.view());
        assert_eq!(p, array![[0.5, 0.0, 0.5]]);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut grads = Gradients::default();
        grads.set(ParamId(0), array![[3.0, 4.0]]);
        let before = grads.clip_global_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }
}
