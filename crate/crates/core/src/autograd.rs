//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! gradients for every node and every parameter read from the
//! [`ParamStore`]. Graphs are cheap, single-use and never mutate the store.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

/// Named trainable tensors. Names are canonical keys in checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    #[serde(skip)]
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
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

    /// Gaussian initialization with the given standard deviation.
    pub fn insert_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.insert(name, Matrix::from_vec(rows, cols, data))
    }

    pub fn insert_constant(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        value: f64,
    ) -> ParamId {
        self.insert(name, Matrix::from_vec(rows, cols, vec![value; rows * cols]))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }

    /// Rebuilds the name index; required after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), ParamId(i)))
            .collect();
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Embed(ParamId, Vec<usize>),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm(NodeId, Vec<f64>),
    NormalizeRows(NodeId, Vec<f64>),
    SelectRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    GatherElems(NodeId, Vec<(usize, usize)>),
    Sum(NodeId),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// A single-use computation tape.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

/// Result of a backward pass.
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient w.r.t. a node, or `None` if the loss does not depend on it.
    pub fn node(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes[id.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Dense parameter gradients, zero-filled for untouched parameters.
    pub fn into_param_grads(self, store: &ParamStore) -> Vec<Matrix> {
        self.params
            .into_iter()
            .zip(store.ids())
            .map(|(g, id)| {
                g.unwrap_or_else(|| {
                    let v = store.get(id);
                    Matrix::zeros(v.rows, v.cols)
                })
            })
            .collect()
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        dst.iter_mut().for_each(|d| *d = 0.0);
        return;
    }
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.shape(), (1, 1), "node is not a scalar");
        v.data[0]
    }

    /// Constant or differentiable input (gradients are still reported).
    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let value = self.store.get(id).clone();
        self.push(value, Op::Param(id))
    }

    /// Row lookup into a parameter table without copying the full table.
    pub fn embed(&mut self, id: ParamId, rows: &[usize]) -> NodeId {
        let table = self.store.get(id);
        let mut out = Matrix::zeros(rows.len(), table.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(table.row(r));
        }
        self.push(out, Op::Embed(id, rows.to_vec()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "sub shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect();
        let v = Matrix::from_vec(x.rows, x.cols, data);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let v = Matrix::from_vec(x.rows, x.cols, data);
        self.push(v, Op::Mul(a, b))
    }

    /// Broadcast-add a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((1, x.cols), r.shape(), "add_row shape mismatch");
        let mut v = x.clone();
        for i in 0..v.rows {
            for (o, b) in v.row_mut(i).iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    /// Broadcast-multiply every row of `a` by a `1 × c` row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((1, x.cols), r.shape(), "mul_row shape mismatch");
        let mut v = x.clone();
        for i in 0..v.rows {
            for (o, b) in v.row_mut(i).iter_mut().zip(&r.data) {
                *o *= b;
            }
        }
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// Row-wise softmax. `-inf` entries get probability exactly zero.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = Matrix::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            softmax_row(x.row(r), v.row_mut(r));
        }
        self.push(v, Op::Softmax(a))
    }

    /// Row-wise softmax restricted to positions where `mask` is true.
    /// Masked-out positions receive `-inf` logits.
    pub fn masked_softmax_rows(&mut self, a: NodeId, mask: &[Vec<bool>]) -> NodeId {
        let x = self.value(a);
        assert_eq!(mask.len(), x.rows, "mask row count mismatch");
        let mut masked = x.clone();
        for (r, m) in mask.iter().enumerate() {
            assert_eq!(m.len(), x.cols, "mask column count mismatch");
            for (v, &keep) in masked.row_mut(r).iter_mut().zip(m) {
                if !keep {
                    *v = f64::NEG_INFINITY;
                }
            }
        }
        let mut v = Matrix::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            softmax_row(masked.row(r), v.row_mut(r));
        }
        self.push(v, Op::Softmax(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = x.clone();
        for r in 0..x.rows {
            let row = v.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|z| *z -= lse);
        }
        self.push(v, Op::LogSoftmax(a))
    }

    /// Row-wise standardization (no affine part).
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = self.value(a);
        let mut v = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = v.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|z| *z = (*z - mean) * is);
            inv_std.push(is);
        }
        self.push(v, Op::LayerNorm(a, inv_std))
    }

    /// Scales each row to unit L2 norm. Rows must be nonzero.
    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = x.clone();
        let mut norms = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = v.row_mut(r);
            let n = dot(row, row).sqrt();
            row.iter_mut().for_each(|z| *z /= n);
            norms.push(n);
        }
        self.push(v, Op::NormalizeRows(a, norms))
    }

    pub fn select_rows(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let x = self.value(a);
        let mut v = Matrix::zeros(rows.len(), x.cols);
        for (i, &r) in rows.iter().enumerate() {
            v.row_mut(i).copy_from_slice(x.row(r));
        }
        self.push(v, Op::SelectRows(a, rows.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice_cols out of range");
        let mut v = Matrix::zeros(x.rows, len);
        for r in 0..x.rows {
            v.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[offset..offset + m.cols].copy_from_slice(m.row(r));
            }
            offset += m.cols;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Picks individual entries into an `n × 1` column.
    pub fn gather_elems(&mut self, a: NodeId, at: &[(usize, usize)]) -> NodeId {
        let x = self.value(a);
        let data = at.iter().map(|&(r, c)| x.get(r, c)).collect();
        let v = Matrix::from_vec(at.len(), 1, data);
        self.push(v, Op::GatherElems(a, at.to_vec()))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let scaled: Vec<NodeId> = terms.iter().map(|&(n, w)| self.scale(n, w)).collect();
        let stacked = self.concat_rows(&scaled);
        self.sum(stacked)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward requires a scalar loss");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let mut params: Vec<Option<Matrix>> = vec![None; self.store.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        fn acc(slot: &mut Option<Matrix>, g: Matrix) {
            match slot {
                Some(m) => m.add_assign(&g),
                None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => acc(&mut params[p.0], dy.clone()),
                Op::Embed(p, rows) => {
                    let table = self.store.get(*p);
                    let slot = params[p.0].get_or_insert_with(|| Matrix::zeros(table.rows, table.cols));
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, g) in slot.row_mut(r).iter_mut().zip(dy.row(i)) {
                            *o += g;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let da = dy.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&dy);
                    acc(&mut grads[a.0], da);
                    acc(&mut grads[b.0], db);
                }
                Op::MatMulT(a, b) => {
                    // y = a bᵀ ; da = dy b ; db = dyᵀ a
                    let da = dy.matmul(self.value(*b));
                    let db = dy.t_matmul(self.value(*a));
                    acc(&mut grads[a.0], da);
                    acc(&mut grads[b.0], db);
                }
                Op::Transpose(a) => acc(&mut grads[a.0], dy.transpose()),
                Op::Add(a, b) => {
                    acc(&mut grads[a.0], dy.clone());
                    acc(&mut grads[b.0], dy.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads[b.0], dy.map(|x| -x));
                    acc(&mut grads[a.0], dy.clone());
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let da = Matrix::from_vec(
                        dy.rows,
                        dy.cols,
                        dy.data.iter().zip(&y.data).map(|(g, v)| g * v).collect(),
                    );
                    let db = Matrix::from_vec(
                        dy.rows,
                        dy.cols,
                        dy.data.iter().zip(&x.data).map(|(g, v)| g * v).collect(),
                    );
                    acc(&mut grads[a.0], da);
                    acc(&mut grads[b.0], db);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Matrix::zeros(1, dy.cols);
                    for r in 0..dy.rows {
                        for (o, g) in dr.data.iter_mut().zip(dy.row(r)) {
                            *o += g;
                        }
                    }
                    acc(&mut grads[row.0], dr);
                    acc(&mut grads[a.0], dy.clone());
                }
                Op::MulRow(a, row) => {
                    let x = self.value(*a);
                    let rv = self.value(*row);
                    let mut dr = Matrix::zeros(1, dy.cols);
                    let mut da = dy.clone();
                    for r in 0..dy.rows {
                        for c in 0..dy.cols {
                            dr.data[c] += dy.get(r, c) * x.get(r, c);
                            da.set(r, c, dy.get(r, c) * rv.data[c]);
                        }
                    }
                    acc(&mut grads[row.0], dr);
                    acc(&mut grads[a.0], da);
                }
                Op::Scale(a, f) => acc(&mut grads[a.0], dy.map(|g| g * f)),
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let data = dy
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(g, &v)| g * gelu_grad(v))
                        .collect();
                    acc(&mut grads[a.0], Matrix::from_vec(dy.rows, dy.cols, data));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let data = dy
                        .data
                        .iter()
                        .zip(&y.data)
                        .map(|(g, t)| g * (1.0 - t * t))
                        .collect();
                    acc(&mut grads[a.0], Matrix::from_vec(dy.rows, dy.cols, data));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(dy.rows, dy.cols);
                    for r in 0..dy.rows {
                        let s = dot(dy.row(r), y.row(r));
                        for ((o, g), p) in dx.row_mut(r).iter_mut().zip(dy.row(r)).zip(y.row(r)) {
                            *o = p * (g - s);
                        }
                    }
                    acc(&mut grads[a.0], dx);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(dy.rows, dy.cols);
                    for r in 0..dy.rows {
                        let s: f64 = dy.row(r).iter().sum();
                        for ((o, g), ly) in dx.row_mut(r).iter_mut().zip(dy.row(r)).zip(y.row(r)) {
                            *o = g - ly.exp() * s;
                        }
                    }
                    acc(&mut grads[a.0], dx);
                }
                Op::LayerNorm(a, inv_std) => {
                    let xhat = &node.value;
                    let mut dx = Matrix::zeros(dy.rows, dy.cols);
                    let n = dy.cols as f64;
                    for r in 0..dy.rows {
                        let g = dy.row(r);
                        let h = xhat.row(r);
                        let mean_g = g.iter().sum::<f64>() / n;
                        let mean_gh = dot(g, h) / n;
                        for ((o, gi), hi) in dx.row_mut(r).iter_mut().zip(g).zip(h) {
                            *o = inv_std[r] * (gi - mean_g - hi * mean_gh);
                        }
                    }
                    acc(&mut grads[a.0], dx);
                }
                Op::NormalizeRows(a, norms) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(dy.rows, dy.cols);
                    for r in 0..dy.rows {
                        let proj = dot(y.row(r), dy.row(r));
                        for ((o, g), yi) in dx.row_mut(r).iter_mut().zip(dy.row(r)).zip(y.row(r)) {
                            *o = (g - yi * proj) / norms[r];
                        }
                    }
                    acc(&mut grads[a.0], dx);
                }
                Op::SelectRows(a, rows) => {
                    let (ar, ac) = self.shape(*a);
                    let mut dx = Matrix::zeros(ar, ac);
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, g) in dx.row_mut(r).iter_mut().zip(dy.row(i)) {
                            *o += g;
                        }
                    }
                    acc(&mut grads[a.0], dx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (pr, pc) = self.shape(*p);
                        let slice = dy.data[offset * pc..(offset + pr) * pc].to_vec();
                        acc(&mut grads[p.0], Matrix::from_vec(pr, pc, slice));
                        offset += pr;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (ar, ac) = self.shape(*a);
                    let mut dx = Matrix::zeros(ar, ac);
                    for r in 0..ar {
                        dx.row_mut(r)[*start..*start + dy.cols].copy_from_slice(dy.row(r));
                    }
                    acc(&mut grads[a.0], dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (pr, pc) = self.shape(*p);
                        let mut dp = Matrix::zeros(pr, pc);
                        for r in 0..pr {
                            dp.row_mut(r).copy_from_slice(&dy.row(r)[offset..offset + pc]);
                        }
                        acc(&mut grads[p.0], dp);
                        offset += pc;
                    }
                }
                Op::GatherElems(a, at) => {
                    let (ar, ac) = self.shape(*a);
                    let mut dx = Matrix::zeros(ar, ac);
                    for (i, &(r, c)) in at.iter().enumerate() {
                        dx.data[r * ac + c] += dy.data[i];
                    }
                    acc(&mut grads[a.0], dx);
                }
                Op::Sum(a) => {
                    let (ar, ac) = self.shape(*a);
                    acc(&mut grads[a.0], Matrix::from_vec(ar, ac, vec![dy.data[0]; ar * ac]));
                }
            }
            grads[idx] = Some(dy);
        }
        Gradients {
            nodes: grads,
            params,
        }
    }
}
