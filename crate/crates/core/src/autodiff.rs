//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every primitive applied during a forward pass.
//! Trainable tensors enter the tape by reference through [`Tape::param`],
//! so building a graph never copies parameter tables. [`Tape::backward`]
//! walks the tape once in reverse and returns the gradient of a scalar
//! node with respect to every node that depends on a leaf.
//!
//! Every primitive checks its output for NaN or infinity and fails with
//! [`Error::NonFinite`] naming the op.
//!
//! ```
//! use dpmtl::autodiff::{Tape, Tensor};
//!
//! let w = Tensor::row(vec![1.0, -2.0, 3.0]);
//! let mut tape = Tape::new();
//! let x = tape.param(&w);
//! let loss = tape.sum(x).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[1.0, 1.0, 1.0]);
//! ```

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix. Vectors are `n x 1` or `1 x n`; scalars `1 x 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![value] }
    }

    /// Column vector.
    pub fn column(data: Vec<f64>) -> Self {
        Tensor { rows: data.len(), cols: 1, data }
    }

    /// Row vector.
    pub fn row(data: Vec<f64>) -> Self {
        Tensor { rows: 1, cols: data.len(), data }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_slice_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn fmt_shape(t: &Tensor) -> String {
    format!("{}x{}", t.rows, t.cols)
}

/// Stable `ln(sum(exp(xs)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

/// `x - log_sum_exp(x)` elementwise.
pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(xs);
    xs.iter().map(|x| x - z).collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(xs);
    xs.iter().map(|x| (x - z).exp()).collect()
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LogSoftmax(Var),
    LogSumExp(Var, Vec<Vec<usize>>),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records primitive applications in topological order.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest `|x|` over the inputs of every rectifier on the tape, or
    /// `None` without rectifiers. Finite differences are only meaningful
    /// when no input sits within the step of the kink at zero.
    pub fn kink_distance(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(self.nodes[a.0].value.data.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()))),
                _ => None,
            })
            .reduce(f64::min)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Trainable leaf borrowed from a parameter store.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.push_raw(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Trainable leaf owned by the tape.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_raw(Cow::Owned(t), Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(Cow::Owned(t), Op::Constant, false)
    }

    fn push_raw(&mut self, value: Cow<'p, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(k) = value.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{name} produced {} at flat index {k}", value.data[k])));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(Cow::Owned(value), op, needs_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(op, format!("{} vs {}", fmt_shape(x), fmt_shape(y))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        Tensor { rows: x.rows, cols: x.cols, data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect() }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor { rows: x.rows, cols: x.cols, data: x.data.iter().map(|&p| f(p)).collect() }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |p, q| p + q);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |p, q| p - q);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |p, q| p * q);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.map(a, |p| p * c);
        self.push("scale", v, Op::Scale(a, c), &[a])
    }

    /// Adds a `1 x c` row to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(row));
        if b.rows != 1 || b.cols != x.cols {
            return Err(Error::shape("add_row", format!("{} + {}", fmt_shape(x), fmt_shape(b))));
        }
        let mut v = x.clone();
        for r in 0..v.rows {
            for (o, &bb) in v.row_slice_mut(r).iter_mut().zip(&b.data) {
                *o += bb;
            }
        }
        self.push("add_row", v, Op::AddRow(a, row), &[a, row])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols != y.rows {
            return Err(Error::shape("matmul", format!("{} * {}", fmt_shape(x), fmt_shape(y))));
        }
        let v = matmul_raw(x, y);
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    /// Joins matrices side by side. All inputs need the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let rows = self.value(*first).rows;
        if parts.iter().any(|p| self.value(*p).rows != rows) {
            let shapes: Vec<String> = parts.iter().map(|p| fmt_shape(self.value(*p))).collect();
            return Err(Error::shape("concat_cols", shapes.join(", ")));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let v = Tensor { rows, cols, data };
        self.push("concat_cols", v, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Stacks matrices vertically. All inputs need the same column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let cols = self.value(*first).cols;
        if parts.iter().any(|p| self.value(*p).cols != cols) {
            let shapes: Vec<String> = parts.iter().map(|p| fmt_shape(self.value(*p))).collect();
            return Err(Error::shape("concat_rows", shapes.join(", ")));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&self.value(*p).data);
        }
        let v = Tensor { rows: data.len() / cols.max(1), cols, data };
        self.push("concat_rows", v, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Row `k` of the output is row `indices[k]` of `table`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {}", fmt_shape(t))));
        }
        let mut data = Vec::with_capacity(indices.len() * t.cols);
        for &i in indices {
            data.extend_from_slice(t.row_slice(i));
        }
        let v = Tensor { rows: indices.len(), cols: t.cols, data };
        self.push("gather_rows", v, Op::GatherRows(table, indices.to_vec()), &[table])
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start >= end || end > x.cols {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {}", fmt_shape(x))));
        }
        let mut data = Vec::with_capacity(x.rows * (end - start));
        for r in 0..x.rows {
            data.extend_from_slice(&x.row_slice(r)[start..end]);
        }
        let v = Tensor { rows: x.rows, cols: end - start, data };
        self.push("slice_cols", v, Op::SliceCols(a, start, end), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, sigmoid_scalar);
        self.push("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, f64::tanh);
        self.push("tanh", v, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |p| p.max(0.0));
        self.push("relu", v, Op::Relu(a), &[a])
    }

    /// Log-softmax of every row.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut v = x.clone();
        for r in 0..v.rows {
            let z = log_sum_exp(x.row_slice(r));
            for o in v.row_slice_mut(r) {
                *o -= z;
            }
        }
        self.push("log_softmax", v, Op::LogSoftmax(a), &[a])
    }

    /// One output per group: `ln(sum(exp(x[k])))` over the flat indices `k`
    /// listed in the group. Returns a `groups x 1` column.
    pub fn log_sum_exp(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let x = self.value(a);
        let mut out = Vec::with_capacity(groups.len());
        let mut buf = Vec::new();
        for (g, idx) in groups.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::shape("log_sum_exp", format!("group {g} is empty")));
            }
            buf.clear();
            for &k in idx {
                let v = *x
                    .data
                    .get(k)
                    .ok_or_else(|| Error::shape("log_sum_exp", format!("index {k} of {}", fmt_shape(x))))?;
                buf.push(v);
            }
            out.push(log_sum_exp(&buf));
        }
        let v = Tensor::column(out);
        self.push("log_sum_exp", v, Op::LogSumExp(a, groups), &[a])
    }

    /// Sum of each row, as an `r x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data = (0..x.rows).map(|r| x.row_slice(r).iter().sum()).collect();
        let v = Tensor::column(data);
        self.push("row_sum", v, Op::RowSum(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).data.iter().sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.data.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let v = Tensor::scalar(x.data.iter().sum::<f64>() / x.data.len() as f64);
        self.push("mean", v, Op::Mean(a), &[a])
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != [1, 1] {
            return Err(Error::Contract(format!("backward needs a scalar loss, got {}", fmt_shape(lv))));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let [r, c] = self.value(v).shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c)))
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let neg = Tensor { rows: g.rows, cols: g.cols, data: g.data.iter().map(|v| -v).collect() };
                self.accumulate(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let ga = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(&y.data).map(|(p, q)| p * q).collect(),
                };
                let gb = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(&x.data).map(|(p, q)| p * q).collect(),
                };
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, c) => {
                let ga = Tensor { rows: g.rows, cols: g.cols, data: g.data.iter().map(|p| p * c).collect() };
                self.accumulate(grads, *a, ga);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if let Some(slot) = self.grad_slot(grads, *row) {
                    for r in 0..g.rows {
                        for (s, v) in slot.data.iter_mut().zip(g.row_slice(r)) {
                            *s += v;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, matmul_bt(g, y));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, matmul_at(x, g));
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols;
                    if self.nodes[p.0].needs_grad {
                        let mut data = Vec::with_capacity(g.rows * w);
                        for r in 0..g.rows {
                            data.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                        }
                        self.accumulate(grads, *p, Tensor { rows: g.rows, cols: w, data });
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).data.len();
                    if self.nodes[p.0].needs_grad {
                        let [r, c] = self.value(*p).shape();
                        let data = g.data[offset..offset + n].to_vec();
                        self.accumulate(grads, *p, Tensor { rows: r, cols: c, data });
                    }
                    offset += n;
                }
            }
            Op::GatherRows(table, indices) => {
                if let Some(slot) = self.grad_slot(grads, *table) {
                    let cols = slot.cols;
                    for (k, &i) in indices.iter().enumerate() {
                        let src = &g.data[k * cols..(k + 1) * cols];
                        for (s, v) in slot.data[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                            *s += v;
                        }
                    }
                }
            }
            Op::SliceCols(a, start, end) => {
                if let Some(slot) = self.grad_slot(grads, *a) {
                    let w = end - start;
                    for r in 0..g.rows {
                        let dst = &mut slot.row_slice_mut(r)[*start..*end];
                        for (s, v) in dst.iter_mut().zip(&g.data[r * w..(r + 1) * w]) {
                            *s += v;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let data = g.data.iter().zip(&out.data).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                self.accumulate(grads, *a, Tensor { rows: g.rows, cols: g.cols, data });
            }
            Op::Tanh(a) => {
                let data = g.data.iter().zip(&out.data).map(|(gv, t)| gv * (1.0 - t * t)).collect();
                self.accumulate(grads, *a, Tensor { rows: g.rows, cols: g.cols, data });
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = g.data.iter().zip(&x.data).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect();
                self.accumulate(grads, *a, Tensor { rows: g.rows, cols: g.cols, data });
            }
            Op::LogSoftmax(a) => {
                let mut ga = Tensor::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let gs: f64 = g.row_slice(r).iter().sum();
                    let lp = out.row_slice(r);
                    for ((o, gv), l) in ga.row_slice_mut(r).iter_mut().zip(g.row_slice(r)).zip(lp) {
                        *o = gv - l.exp() * gs;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSumExp(a, groups) => {
                let x = self.value(*a);
                if let Some(slot) = self.grad_slot(grads, *a) {
                    for (gidx, idx) in groups.iter().enumerate() {
                        let (gv, z) = (g.data[gidx], out.data[gidx]);
                        for &k in idx {
                            slot.data[k] += gv * (x.data[k] - z).exp();
                        }
                    }
                }
            }
            Op::RowSum(a) => {
                let x = self.value(*a);
                let mut ga = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    ga.row_slice_mut(r).fill(g.data[r]);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let [r, c] = self.value(*a).shape();
                self.accumulate(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let [r, c] = self.value(*a).shape();
                let n = (r * c) as f64;
                self.accumulate(grads, *a, Tensor::filled(r, c, g.item() / n));
            }
        }
    }
}

fn matmul_raw(x: &Tensor, y: &Tensor) -> Tensor {
    let (r, k, c) = (x.rows, x.cols, y.cols);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let a = x.data[i * k + p];
            if a == 0.0 {
                continue;
            }
            for (o, b) in orow.iter_mut().zip(&y.data[p * c..(p + 1) * c]) {
                *o += a * b;
            }
        }
    }
    Tensor { rows: r, cols: c, data: out }
}

/// `g * y^T`
fn matmul_bt(g: &Tensor, y: &Tensor) -> Tensor {
    let (r, c, k) = (g.rows, g.cols, y.rows);
    let mut out = vec![0.0; r * k];
    for i in 0..r {
        let grow = &g.data[i * c..(i + 1) * c];
        for p in 0..k {
            let yrow = &y.data[p * c..(p + 1) * c];
            out[i * k + p] = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
        }
    }
    Tensor { rows: r, cols: k, data: out }
}

/// `x^T * g`
fn matmul_at(x: &Tensor, g: &Tensor) -> Tensor {
    let (r, k, c) = (x.rows, x.cols, g.cols);
    let mut out = vec![0.0; k * c];
    for i in 0..r {
        let grow = &g.data[i * c..(i + 1) * c];
        for p in 0..k {
            let a = x.data[i * k + p];
            if a == 0.0 {
                continue;
            }
            for (o, b) in out[p * c..(p + 1) * c].iter_mut().zip(grow) {
                *o += a * b;
            }
        }
    }
    Tensor { rows: k, cols: c, data: out }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    /// Moves the gradient out, avoiding a copy.
    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// Returns the largest `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`
/// over every coordinate of every parameter.
pub fn check_gradients<F>(f: F, params: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Argument(format!("epsilon must be positive, got {epsilon}")));
    }
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|v| grads.wrt(*v)).collect()
    };
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for k in 0..p.len() {
            let orig = p.data[k];
            work[pi].data[k] = orig + epsilon;
            let up = eval(&work)?;
            work[pi].data[k] = orig - epsilon;
            let down = eval(&work)?;
            work[pi].data[k] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[pi].data[k];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient check at parameter {pi}, coordinate {k}: analytic {a}, numeric {numeric}"
                )));
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
