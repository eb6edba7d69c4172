//! Reverse-mode differentiation over an explicitly recorded tape.
//!
//! A [`Tape`] is built fresh for each forward pass. Parameters are read
//! from a [`ParamStore`] by reference and receive gradients through
//! [`Tape::backward`], which returns them as a [`Grads`] map instead of
//! mutating the store. [`Tape::stop_gradient`] records a first-class node
//! whose value equals its input but which never propagates gradient.

use std::borrow::Cow;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

pub type ParamId = usize;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                0.5 * x * (1.0 + t)
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// Softmax direction: `Rows` normalizes within each row, `Cols` within each
/// column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (i, n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Gradients keyed by parameter id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads {
    map: BTreeMap<ParamId, Tensor>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.map.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.map.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn add_slice(&mut self, id: ParamId, shape: &[usize], g: &[f32]) {
        match self.map.get_mut(&id) {
            Some(t) => t.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => {
                self.map.insert(id, Tensor::new(shape.to_vec(), g.to_vec()).expect("shape"));
            }
        }
    }

    /// Adds every gradient in `other` into `self`.
    pub fn accumulate(&mut self, other: &Grads) {
        for (&id, t) in &other.map {
            self.add_slice(id, t.shape(), t.data());
        }
    }

    /// Inserts zero gradients for any parameter in `store` that has none.
    pub fn fill_missing(&mut self, store: &ParamStore) {
        for (id, _, v) in store.iter() {
            self.map.entry(id).or_insert_with(|| Tensor::zeros(v.shape()));
        }
    }

    /// L2 norm over all entries.
    pub fn norm(&self) -> f32 {
        self.map
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f32>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f32) {
        for t in self.map.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    StopGradient,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f32),
    Act(Var, Activation),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    RowMean(Var),
    LogSoftmax(Var, Axis),
    Exp(Var),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation graph for one forward pass.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), op, requires_grad)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_owned(t, Op::Leaf, false)
    }

    /// A parameter leaf, borrowed from `store` for the lifetime of the tape.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        self.push(Cow::Borrowed(store.get(id)), Op::Param(id), true)
    }

    /// Same value as `x`; gradient stops here.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push_owned(v, Op::StopGradient, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner dim {k}"), k2));
        }
        let mut out = vec![0.0; m * n];
        gemm(ta.data(), false, tb.data(), false, &mut out, m, k, n, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_owned(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `x + bias` with `bias` broadcast across rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.len() != c {
            return Err(Error::dim("add_bias", c, tb.len()));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(c) {
            row.iter_mut().zip(tb.data()).for_each(|(o, b)| *o += b);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push_owned(out, Op::AddBias(x, bias), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() || ta.cols() != tb.cols() {
            return Err(Error::dim(name, format!("{:?}", ta.shape()), format!("{:?}", tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_owned(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_owned(out, Op::Sub(a, b), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_owned(out, Op::Mul(a, b), rg))
    }

    /// Scales row `r` of `x` by `col[r]`, where `col` is `[rows, 1]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (tx, tc) = (self.value(x), self.value(col));
        if tc.len() != tx.rows() {
            return Err(Error::dim("mul_col", tx.rows(), tc.len()));
        }
        let c = tx.cols();
        let mut out = tx.clone();
        for (row, &w) in out.data_mut().chunks_mut(c).zip(tc.data()) {
            row.iter_mut().for_each(|v| *v *= w);
        }
        let rg = self.rg(x) || self.rg(col);
        Ok(self.push_owned(out, Op::MulCol(x, col), rg))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push_owned(out, Op::Scale(a, s), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return a;
        }
        let out = self.value(a).map(|v| act.apply(v));
        let rg = self.rg(a);
        self.push_owned(out, Op::Act(a, act), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f32::exp);
        let rg = self.rg(a);
        self.push_owned(out, Op::Exp(a), rg)
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::dim("concat_cols", rows, t.rows()));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push_owned(Tensor::matrix(rows, total, data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Row lookup into `table` (an embedding gather).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::dim("gather_rows", format!("index < {}", t.rows()), bad));
        }
        let out = t.select_rows(idx);
        let rg = self.rg(table);
        Ok(self.push_owned(out, Op::GatherRows(table, idx.to_vec()), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f32 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push_owned(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f32>() / t.len() as f32;
        let rg = self.rg(a);
        self.push_owned(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    /// Mean over each row, giving a `[rows, 1]` column.
    pub fn row_mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols() as f32;
        let data: Vec<f32> = (0..t.rows()).map(|r| t.row(r).iter().sum::<f32>() / c).collect();
        let rows = t.rows();
        let rg = self.rg(a);
        self.push_owned(Tensor::matrix(rows, 1, data).expect("shape"), Op::RowMean(a), rg)
    }

    /// Max-subtracted log-softmax along `axis`.
    pub fn log_softmax(&mut self, a: Var, axis: Axis) -> Var {
        let out = log_softmax(self.value(a), axis);
        let rg = self.rg(a);
        self.push_owned(out, Op::LogSoftmax(a, axis), rg)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every parameter leaf reachable from the loss along gradient-carrying
    /// edges receives an entry; parameters behind a stop-gradient receive
    /// none.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("forward pass"));
        }
        let mut grads = Grads::new();
        if !self.rg(loss) {
            return Ok(grads);
        }
        let mut adj: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::StopGradient => {}
                Op::Param(id) => {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite("backward pass"));
                    }
                    grads.add_slice(*id, node.value.shape(), &g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if self.rg(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(&g, false, tb.data(), true, &mut da, m, n, k, 0.0);
                        accumulate(&mut adj, *a, da);
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm(ta.data(), true, &g, false, &mut db, k, m, n, 0.0);
                        accumulate(&mut adj, *b, db);
                    }
                }
                Op::AddBias(x, b) => {
                    if self.rg(*b) {
                        let c = self.value(*b).len();
                        let mut db = vec![0.0; c];
                        for row in g.chunks(c) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        accumulate(&mut adj, *b, db);
                    }
                    if self.rg(*x) {
                        accumulate(&mut adj, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut adj, *b, g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut adj, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut adj, *b, g.iter().map(|v| -v).collect());
                    }
                    if self.rg(*a) {
                        accumulate(&mut adj, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        accumulate(&mut adj, *a, g.iter().zip(tb.data()).map(|(g, y)| g * y).collect());
                    }
                    if self.rg(*b) {
                        accumulate(&mut adj, *b, g.iter().zip(ta.data()).map(|(g, x)| g * x).collect());
                    }
                }
                Op::MulCol(x, col) => {
                    let (tx, tc) = (self.value(*x), self.value(*col));
                    let c = tx.cols();
                    if self.rg(*col) {
                        let d = g.chunks(c).zip(tx.data().chunks(c)).map(|(g, x)| g.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
                        accumulate(&mut adj, *col, d);
                    }
                    if self.rg(*x) {
                        let mut d = g;
                        for (row, &w) in d.chunks_mut(c).zip(tc.data()) {
                            row.iter_mut().for_each(|v| *v *= w);
                        }
                        accumulate(&mut adj, *x, d);
                    }
                }
                Op::Scale(a, s) => {
                    accumulate(&mut adj, *a, g.iter().map(|v| v * s).collect());
                }
                Op::Act(a, act) => {
                    let x = self.value(*a).data();
                    let y = node.value.data();
                    let d = g
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(g, (&x, &y))| g * act.derivative(x, y))
                        .collect();
                    accumulate(&mut adj, *a, d);
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    accumulate(&mut adj, *a, g.iter().zip(y).map(|(g, y)| g * y).collect());
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        if self.rg(p) {
                            let mut d = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                d.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                            }
                            accumulate(&mut adj, p, d);
                        }
                        offset += c;
                    }
                }
                Op::GatherRows(table, idx) => {
                    let t = self.value(*table);
                    let c = t.cols();
                    let mut d = vec![0.0; t.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        d[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g[r * c..(r + 1) * c])
                            .for_each(|(a, b)| *a += b);
                    }
                    accumulate(&mut adj, *table, d);
                }
                Op::SumAll(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut adj, *a, vec![g[0]; n]);
                }
                Op::MeanAll(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut adj, *a, vec![g[0] / n as f32; n]);
                }
                Op::RowMean(a) => {
                    let t = self.value(*a);
                    let c = t.cols();
                    let mut d = Vec::with_capacity(t.len());
                    for &gr in &g {
                        d.extend(std::iter::repeat_n(gr / c as f32, c));
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::LogSoftmax(a, axis) => {
                    // dx = dy - softmax * sum(dy) along the normalized axis.
                    let y = &node.value;
                    let (rows, cols) = (y.rows(), y.cols());
                    let mut d = g.clone();
                    match axis {
                        Axis::Rows => {
                            for r in 0..rows {
                                let s: f32 = g[r * cols..(r + 1) * cols].iter().sum();
                                for c in 0..cols {
                                    d[r * cols + c] -= y.get(r, c).exp() * s;
                                }
                            }
                        }
                        Axis::Cols => {
                            for c in 0..cols {
                                let s: f32 = (0..rows).map(|r| g[r * cols + c]).sum();
                                for r in 0..rows {
                                    d[r * cols + c] -= y.get(r, c).exp() * s;
                                }
                            }
                        }
                    }
                    accumulate(&mut adj, *a, d);
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Vec<f32>>], v: Var, g: Vec<f32>) {
    match &mut adj[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Numerically stable log-sum-exp of a slice. Returns `-inf` for an empty
/// slice.
pub fn logsumexp(xs: &[f32]) -> f32 {
    let m = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f32>().ln()
}

/// Max-subtracted log-softmax of a rank-2 tensor along `axis`.
pub fn log_softmax(t: &Tensor, axis: Axis) -> Tensor {
    let (rows, cols) = (t.rows(), t.cols());
    let mut out = t.clone();
    match axis {
        Axis::Rows => {
            for r in 0..rows {
                let lse = logsumexp(t.row(r));
                out.row_mut(r).iter_mut().for_each(|v| *v -= lse);
            }
        }
        Axis::Cols => {
            for c in 0..cols {
                let col = t.column(c);
                let lse = logsumexp(&col);
                for r in 0..rows {
                    let v = out.get(r, c) - lse;
                    out.set(r, c, v);
                }
            }
        }
    }
    out
}

/// Softmax along `axis`.
pub fn softmax(t: &Tensor, axis: Axis) -> Tensor {
    log_softmax(t, axis).map(f32::exp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_gradient_blocks_flow() {
        // loss = sum(w * x), x behind stop-gradient: grad(x) absent, grad(w) = x.
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let x = store.add("x", Tensor::matrix(1, 3, vec![4.0, 5.0, 6.0]).unwrap());
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let xv = tape.param(&store, x);
        let xs = tape.stop_gradient(xv);
        let p = tape.mul(wv, xs).unwrap();
        let loss = tape.sum_all(p);
        let g = tape.backward(loss).unwrap();
        assert!(!g.contains(x));
        assert_eq!(g.get(w).unwrap().data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn quadratic_gradient() {
        // loss = (w - 3)^2 at w = 5 -> 4
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(5.0));
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let three = tape.constant(Tensor::scalar(3.0));
        let d = tape.sub(wv, three).unwrap();
        let sq = tape.square(d);
        let loss = tape.sum_all(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().item(), 4.0);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[2, 2]));
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        assert!(matches!(tape.backward(wv), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn log_softmax_extremes_normalize() {
        let t = Tensor::from_rows(&[vec![50.0, -50.0, 0.0], vec![-50.0, -50.0, 50.0]]).unwrap();
        for axis in [Axis::Rows, Axis::Cols] {
            let s = softmax(&t, axis);
            assert!(s.is_finite());
        }
        let s = softmax(&t, Axis::Rows);
        for r in 0..2 {
            assert!((s.row(r).iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn logsumexp_small_cases() {
        assert_eq!(logsumexp(&[2.5]), 2.5);
        assert!((logsumexp(&[0.0, 3f32.ln()]) - 4f32.ln()).abs() < 1e-6);
        assert_eq!(logsumexp(&[]), f32::NEG_INFINITY);
    }
}
