//! Define-by-run tape. Every operation appends a node holding its forward
//! value; `backward` sweeps the tape in reverse, which is a valid reverse
//! topological order because parents are always pushed before children.

use std::borrow::Cow;
use std::collections::HashMap;

use super::params::{Gradients, ParameterStore};
use super::tensor::{matmul_a_bt_into, matmul_at_b_into, matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(String),
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Embedding(Var, Vec<usize>),
    SumAll(Var),
    SumCols(Var),
    MaxRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Clamp(Var, f64, f64),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Matmul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(_) => "offset",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::Embedding(..) => "embedding_lookup",
            Op::SumAll(_) => "reduce_sum",
            Op::SumCols(_) => "sum_cols",
            Op::MaxRows(..) => "reduce_max",
            Op::Pick(..) => "pick",
            Op::Clamp(..) => "clamp",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::Matmul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::Embedding(a, _)
            | Op::SumAll(a)
            | Op::SumCols(a)
            | Op::MaxRows(a, _)
            | Op::Pick(a, _)
            | Op::Clamp(a, ..) => vec![*a],
        }
    }
}

/// A recorded operation: kind, parents and cached forward value.
#[derive(Debug)]
pub struct TapeNode<'p> {
    op: Op,
    value: Cow<'p, Tensor>,
    requires_grad: bool,
}

impl TapeNode<'_> {
    pub fn kind(&self) -> &'static str {
        self.op.kind()
    }

    pub fn parents(&self) -> Vec<Var> {
        self.op.parents()
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

/// Reverse-mode tape over matrices, optionally bound to a parameter store.
#[derive(Debug, Default)]
pub struct Graph<'p> {
    params: Option<&'p ParameterStore>,
    param_vars: HashMap<String, Var>,
    nodes: Vec<TapeNode<'p>>,
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            param_vars: HashMap::new(),
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParameterStore) -> Self {
        Self {
            params: Some(params),
            param_vars: HashMap::new(),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &TapeNode<'p> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).dims()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(TapeNode {
            op,
            value: Cow::Owned(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(TapeNode {
            op: Op::Input,
            value: Cow::Owned(value),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let store = self
            .params
            .ok_or_else(|| Error::Contract("graph has no parameter store".into()))?;
        let p = store
            .parameter(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?;
        self.nodes.push(TapeNode {
            op: if p.trainable {
                Op::Param(name.to_string())
            } else {
                Op::Input
            },
            value: Cow::Borrowed(&p.value),
            requires_grad: p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.dim_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Op::Matmul(a, b), Tensor::from_raw(vec![m, n], out)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Op::Transpose(a), Tensor::from_raw(vec![n, m], out))
    }

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (r1, c1) = self.dims(a);
        let (r2, c2) = self.dims(b);
        let dim = |x: usize, y: usize| match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        };
        match (dim(r1, r2), dim(c1, c2)) {
            (Some(r), Some(c)) => Ok((r, c)),
            _ => Err(self.dim_err(op, a, b)),
        }
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (r, c) = self.broadcast_shape(op.kind(), a, b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let out = if ta.dims() == tb.dims() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    out.push(f(bcast_get(ta, i, j), bcast_get(tb, i, j)));
                }
            }
            out
        };
        Ok(self.push(op, Tensor::from_raw(vec![r, c], out)))
    }

    /// Elementwise sum; a `1xn`, `mx1` or `1x1` operand is broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| f(x)).collect();
        let shape = vec![t.rows(), t.cols()];
        self.push(op, Tensor::from_raw(shape, out))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(Op::Scale(a, factor), a, |x| x * factor)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::Offset(a), a, |x| x + c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Op::Tanh(a), a, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Op::Sigmoid(a), a, sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Op::Relu(a), a, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Op::Log(a), a, f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp(a), a, f64::exp)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp(a, lo, hi), a, |x| x.clamp(lo, hi))
    }

    /// Row-wise softmax, shifted by the row max before exponentiation.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims();
        let mut out = Vec::with_capacity(r * c);
        for row in t.data().chunks(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut sum = 0.0;
            for &x in row {
                let e = (x - max).exp();
                sum += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= sum;
            }
        }
        self.push(Op::Softmax(a), Tensor::from_raw(vec![r, c], out))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims();
        let mut out = Vec::with_capacity(r * c);
        for row in t.data().chunks(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|&x| x - lse));
        }
        self.push(Op::LogSoftmax(a), Tensor::from_raw(vec![r, c], out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat of zero tensors".into()));
        };
        let rows = self.dims(first).0;
        for &p in parts {
            if self.dims(p).0 != rows {
                return Err(self.dim_err("concat_cols", first, p));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let c = t.cols();
                out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Tensor::from_raw(vec![rows, cols], out)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat of zero tensors".into()));
        };
        let cols = self.dims(first).1;
        for &p in parts {
            if self.dims(p).1 != cols {
                return Err(self.dim_err("concat_rows", first, p));
            }
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / cols.max(1);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), Tensor::from_raw(vec![rows, cols], out)))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start >= end || end > c {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: vec![r, c],
                right: vec![start, end],
            });
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        Ok(self.push(Op::SliceCols(a, start), Tensor::from_raw(vec![r, w], out)))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start >= end || end > r {
            return Err(Error::Dimension {
                op: "slice_rows",
                left: vec![r, c],
                right: vec![start, end],
            });
        }
        let out = self.value(a).data()[start * c..end * c].to_vec();
        Ok(self.push(Op::SliceRows(a, start), Tensor::from_raw(vec![end - start, c], out)))
    }

    /// Gathers rows `ids` of `table` into a `[ids.len(), cols]` matrix.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, e) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Dimension {
                op: "embedding_lookup",
                left: vec![v, e],
                right: vec![bad],
            });
        }
        if ids.is_empty() {
            return Err(Error::Empty("embedding lookup ids"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            out.extend_from_slice(&src[i * e..(i + 1) * e]);
        }
        Ok(self.push(
            Op::Embedding(table, ids.to_vec()),
            Tensor::from_raw(vec![ids.len(), e], out),
        ))
    }

    /// Sum of all entries as a `1x1` node.
    pub fn reduce_sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    /// Row sums as an `[rows, 1]` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims();
        let out = t.data().chunks(c).map(|row| row.iter().sum()).collect();
        self.push(Op::SumCols(a), Tensor::from_raw(vec![r, 1], out))
    }

    /// Column-wise max over each row segment `[start, end)`, giving one output
    /// row per segment. A single segment covering all rows is max-over-time.
    pub fn reduce_max(&mut self, a: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if segments.is_empty() {
            return Err(Error::Empty("reduce_max segments"));
        }
        for &(s, e) in segments {
            if s >= e || e > r {
                return Err(Error::Dimension {
                    op: "reduce_max",
                    left: vec![r, c],
                    right: vec![s, e],
                });
            }
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(segments.len() * c);
        let mut argmax = Vec::with_capacity(segments.len() * c);
        for &(s, e) in segments {
            for j in 0..c {
                let mut best = s;
                for i in s + 1..e {
                    if src[i * c + j] > src[best * c + j] {
                        best = i;
                    }
                }
                out.push(src[best * c + j]);
                argmax.push(best);
            }
        }
        Ok(self.push(
            Op::MaxRows(a, argmax),
            Tensor::from_raw(vec![segments.len(), c], out),
        ))
    }

    /// Selects `a[i, cols[i]]` for every row, giving an `[rows, 1]` column.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(Error::Dimension {
                op: "pick",
                left: vec![r, c],
                right: vec![cols.len()],
            });
        }
        let src = self.value(a).data();
        let out = cols.iter().enumerate().map(|(i, &j)| src[i * c + j]).collect();
        Ok(self.push(Op::Pick(a, cols.to_vec()), Tensor::from_raw(vec![r, 1], out)))
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    /// Reverse sweep from a scalar `loss`, returning gradients for every
    /// trainable parameter reachable on this tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(&[1, 1], 1.0));
        let mut out = Gradients::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let y = &node.value;
            match &node.op {
                Op::Input => {}
                Op::Param(name) => {
                    let shape = node.value.shape().to_vec();
                    out.insert(name.clone(), Tensor::from_raw(shape, g.into_data()));
                }
                Op::Matmul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).1;
                    if self.needs(*a) {
                        let mut da = vec![0.0; m * k];
                        matmul_a_bt_into(g.data(), self.value(*b).data(), &mut da, m, n, k);
                        accum(&mut grads, *a, da, (m, k));
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; k * n];
                        matmul_at_b_into(self.value(*a).data(), g.data(), &mut db, m, k, n);
                        accum(&mut grads, *b, db, (k, n));
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = self.dims(*a);
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g.data()[j * m + i];
                        }
                    }
                    accum(&mut grads, *a, da, (m, n));
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if self.needs(*a) {
                        let da = self.reduce_to(&g, *a);
                        accum(&mut grads, *a, da, self.dims(*a));
                    }
                    if self.needs(*b) {
                        let mut db = self.reduce_to(&g, *b);
                        if sign < 0.0 {
                            db.iter_mut().for_each(|v| *v = -*v);
                        }
                        accum(&mut grads, *b, db, self.dims(*b));
                    }
                }
                Op::Mul(a, b) => {
                    let (r, c) = g.dims();
                    let ta = self.value(*a);
                    let tb = self.value(*b);
                    if self.needs(*a) {
                        let full = elementwise(r, c, |i, j| g.at(i, j) * bcast_get(tb, i, j));
                        let da = self.reduce_vec_to(full, (r, c), *a);
                        accum(&mut grads, *a, da, self.dims(*a));
                    }
                    if self.needs(*b) {
                        let full = elementwise(r, c, |i, j| g.at(i, j) * bcast_get(ta, i, j));
                        let db = self.reduce_vec_to(full, (r, c), *b);
                        accum(&mut grads, *b, db, self.dims(*b));
                    }
                }
                Op::Scale(a, f) => {
                    let da = g.data().iter().map(|d| d * f).collect();
                    accum(&mut grads, *a, da, self.dims(*a));
                }
                Op::Offset(a) => accum(&mut grads, *a, g.into_data(), self.dims(*a)),
                Op::Tanh(a) => {
                    let da = zip_map(&g, y, |d, t| d * (1.0 - t * t));
                    accum(&mut grads, *a, da, self.dims(*a));
                }
                Op::Sigmoid(a) => {
                    let da = zip_map(&g, y, |d, s| d * s * (1.0 - s));
                    accum(&mut grads, *a, da, self.dims(*a));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let da = zip_map(&g, x, |d, x| if x > 0.0 { d } else { 0.0 });
                    accum(&mut grads, *a, da, self.dims(*a));
                }
                Op::Log(a) => {
                    let x = self.value(*a);
                    let da = zip_map(&g, x, |d, x| d / x);
                    accum(&mut grads, *a, da, self.dims(*a));
                }
                Op::Exp(a) => {
                    let da = zip_map(&g, y, |d, e| d * e);
                    accum(&mut grads, *a, da, self.dims(*a));
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a);
                    let da = zip_map(&g, x, |d, x| if x < *lo || x > *hi { 0.0 } else { d });
                    accum(&mut grads, *a, da, self.dims(*a));
                }
                Op::Softmax(a) => {
                    let c = y.cols();
                    let mut da = Vec::with_capacity(y.len());
                    for (gr, yr) in g.data().chunks(c).zip(y.data().chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(d, s)| d * s).sum();
                        da.extend(gr.iter().zip(yr).map(|(d, s)| s * (d - dot)));
                    }
                    accum(&mut grads, *a, da, self.dims(*a));
                }
                Op::LogSoftmax(a) => {
                    let c = y.cols();
                    let mut da = Vec::with_capacity(y.len());
                    for (gr, yr) in g.data().chunks(c).zip(y.data().chunks(c)) {
                        let total: f64 = gr.iter().sum();
                        da.extend(gr.iter().zip(yr).map(|(d, l)| d - l.exp() * total));
                    }
                    accum(&mut grads, *a, da, self.dims(*a));
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let c = self.dims(*p).1;
                        if self.needs(*p) {
                            let mut dp = Vec::with_capacity(rows * c);
                            for i in 0..rows {
                                dp.extend_from_slice(
                                    &g.data()[i * total + offset..i * total + offset + c],
                                );
                            }
                            accum(&mut grads, *p, dp, (rows, c));
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (r, c) = self.dims(*p);
                        if self.needs(*p) {
                            let dp = g.data()[offset..offset + r * c].to_vec();
                            accum(&mut grads, *p, dp, (r, c));
                        }
                        offset += r * c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.dims(*a);
                    let w = g.cols();
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        da[i * c + start..i * c + start + w]
                            .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    accum(&mut grads, *a, da, (r, c));
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.dims(*a);
                    let mut da = vec![0.0; r * c];
                    da[start * c..start * c + g.len()].copy_from_slice(g.data());
                    accum(&mut grads, *a, da, (r, c));
                }
                Op::Embedding(table, ids) => {
                    let (v, e) = self.dims(*table);
                    let mut dt = vec![0.0; v * e];
                    for (k, &id) in ids.iter().enumerate() {
                        for (d, s) in dt[id * e..(id + 1) * e]
                            .iter_mut()
                            .zip(&g.data()[k * e..(k + 1) * e])
                        {
                            *d += s;
                        }
                    }
                    accum(&mut grads, *table, dt, (v, e));
                }
                Op::SumAll(a) => {
                    let (r, c) = self.dims(*a);
                    accum(&mut grads, *a, vec![g.data()[0]; r * c], (r, c));
                }
                Op::SumCols(a) => {
                    let (r, c) = self.dims(*a);
                    let mut da = Vec::with_capacity(r * c);
                    for i in 0..r {
                        da.extend(std::iter::repeat_n(g.data()[i], c));
                    }
                    accum(&mut grads, *a, da, (r, c));
                }
                Op::MaxRows(a, argmax) => {
                    let (r, c) = self.dims(*a);
                    let mut da = vec![0.0; r * c];
                    for (k, &row) in argmax.iter().enumerate() {
                        da[row * c + k % c] += g.data()[k];
                    }
                    accum(&mut grads, *a, da, (r, c));
                }
                Op::Pick(a, cols) => {
                    let (r, c) = self.dims(*a);
                    let mut da = vec![0.0; r * c];
                    for (i, &j) in cols.iter().enumerate() {
                        da[i * c + j] = g.data()[i];
                    }
                    accum(&mut grads, *a, da, (r, c));
                }
            }
        }
        Ok(out)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Sums a broadcast gradient back down to the operand's shape.
    fn reduce_to(&self, g: &Tensor, target: Var) -> Vec<f64> {
        if g.dims() == self.dims(target) {
            return g.data().to_vec();
        }
        self.reduce_vec_to(g.data().to_vec(), g.dims(), target)
    }

    fn reduce_vec_to(&self, g: Vec<f64>, (r, c): (usize, usize), target: Var) -> Vec<f64> {
        let (tr, tc) = self.dims(target);
        if (tr, tc) == (r, c) {
            return g;
        }
        let mut out = vec![0.0; tr * tc];
        for i in 0..r {
            for j in 0..c {
                let ti = if tr == 1 { 0 } else { i };
                let tj = if tc == 1 { 0 } else { j };
                out[ti * tc + tj] += g[i * c + j];
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn bcast_get(t: &Tensor, i: usize, j: usize) -> f64 {
    let (r, c) = t.dims();
    let i = if r == 1 { 0 } else { i };
    let j = if c == 1 { 0 } else { j };
    t.data()[i * c + j]
}

fn elementwise(r: usize, c: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(f(i, j));
        }
    }
    out
}

fn zip_map(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.data().iter().zip(other.data()).map(|(&d, &x)| f(d, x)).collect()
}

fn accum(grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>, (r, c): (usize, usize)) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(&delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(Tensor::from_raw(vec![r, c], delta)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.scalar(y), 0.5);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(2, 3, vec![1000.0, 1001.0, 999.0, -5.0, 0.0, 5.0]).unwrap());
        let y = g.softmax(x);
        for row in g.value(y).data().chunks(3) {
            assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
            assert!(close(row.iter().sum(), 1.0, 1e-12));
        }
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a_val = vec![3.0, -1.5, 2.25, 7.0];
        let a = g.input(Tensor::matrix(2, 2, a_val.clone()).unwrap());
        let p = g.matmul(i, a).unwrap();
        assert_eq!(g.value(p).data(), a_val.as_slice());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
        let c = g.input(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, c), Err(Error::Dimension { .. })));
    }

    fn store_with(name: &str, t: Tensor) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(name, t, true).unwrap();
        s
    }

    #[test]
    fn square_gradient() {
        let s = store_with("w", Tensor::scalar(3.0));
        let mut g = Graph::with_params(&s);
        let w = g.param("w").unwrap();
        let sq = g.mul(w, w).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[6.0]);
    }

    #[test]
    fn sigmoid_sum_gradient_at_zero() {
        let s = store_with("w", Tensor::zeros(&[4]));
        let mut g = Graph::with_params(&s);
        let w = g.param("w").unwrap();
        let y = g.sigmoid(w);
        let loss = g.reduce_sum(y);
        let grads = g.backward(loss).unwrap();
        let gw = grads.get("w").unwrap();
        assert_eq!(gw.shape(), &[4]);
        assert!(gw.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let s = store_with("w", Tensor::zeros(&[2]));
        let mut g = Graph::with_params(&s);
        let w = g.param("w").unwrap();
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_parameters_get_no_gradient() {
        let mut s = store_with("w", Tensor::scalar(2.0));
        s.insert("unused", Tensor::scalar(1.0), true).unwrap();
        let mut g = Graph::with_params(&s);
        let w = g.param("w").unwrap();
        let _u = g.param("unused").unwrap();
        let loss = g.scale(w, 3.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[3.0]);
        assert!(grads.get("unused").is_none());
    }

    #[test]
    fn frozen_parameters_are_constants() {
        let mut s = ParameterStore::new();
        s.insert("emb", Tensor::scalar(2.0), false).unwrap();
        let mut g = Graph::with_params(&s);
        let e = g.param("emb").unwrap();
        let loss = g.mul(e, e).unwrap();
        assert!(g.backward(loss).unwrap().is_empty());
    }

    #[test]
    fn repeated_backward_is_identical() {
        let s = store_with("w", Tensor::matrix(2, 2, vec![0.3, -0.2, 0.1, 0.7]).unwrap());
        let mut g = Graph::with_params(&s);
        let w = g.param("w").unwrap();
        let t = g.tanh(w);
        let m = g.matmul(t, w).unwrap();
        let sm = g.softmax(m);
        let l = g.log(sm);
        let loss = g.reduce_sum(l);
        assert_eq!(g.backward(loss).unwrap(), g.backward(loss).unwrap());
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::zeros(&[3, 2]), true).unwrap();
        s.insert("b", Tensor::zeros(&[2]), true).unwrap();
        s.insert("c", Tensor::zeros(&[3, 1]), true).unwrap();
        let mut g = Graph::with_params(&s);
        let x = g.param("x").unwrap();
        let b = g.param("b").unwrap();
        let c = g.param("c").unwrap();
        let y = g.add(x, b).unwrap();
        let z = g.mul(y, c).unwrap();
        let w = g.add(z, b).unwrap();
        let loss = g.reduce_sum(w);
        let grads = g.backward(loss).unwrap();
        // d/db = sum over rows of (c + 1) = 3 with c = 0
        assert_eq!(grads.get("b").unwrap().data(), &[3.0, 3.0]);
        assert_eq!(grads.get("b").unwrap().shape(), &[2]);
        assert_eq!(grads.get("c").unwrap().shape(), &[3, 1]);
    }

    #[test]
    fn reduce_max_routes_gradient_to_argmax() {
        let s = store_with("x", Tensor::matrix(3, 2, vec![1.0, 5.0, 4.0, 2.0, 0.0, 9.0]).unwrap());
        let mut g = Graph::with_params(&s);
        let x = g.param("x").unwrap();
        let m = g.reduce_max(x, &[(0, 2), (2, 3)]).unwrap();
        assert_eq!(g.value(m).data(), &[4.0, 5.0, 0.0, 9.0]);
        let loss = g.reduce_sum(m);
        let gx = g.backward(loss).unwrap();
        assert_eq!(gx.get("x").unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn relu_kink_goes_to_flat_side() {
        let s = store_with("x", Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let mut g = Graph::with_params(&s);
        let x = g.param("x").unwrap();
        let r = g.relu(x);
        let loss = g.reduce_sum(r);
        let gx = g.backward(loss).unwrap();
        assert_eq!(gx.get("x").unwrap().data(), &[0.0, 0.0, 1.0]);
    }
}
