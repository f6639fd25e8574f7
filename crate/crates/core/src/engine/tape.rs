use std::borrow::Cow;
use std::sync::Arc;

use super::array::gemm_into;
use super::{count_rotation_op, Array, ParamStore, Real};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-row rotation angles stored as cosines and sines.
#[derive(Debug, Clone, PartialEq)]
pub struct RotTable<T> {
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

impl<T: Real> RotTable<T> {
    pub fn from_angles(angles: &[f64]) -> Self {
        let (sin, cos) = angles
            .iter()
            .map(|a| {
                let (s, c) = a.sin_cos();
                (T::of(s), T::of(c))
            })
            .unzip();
        RotTable { cos, sin }
    }

    pub fn len(&self) -> usize {
        self.cos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cos.is_empty()
    }

    /// Rotates every consecutive pair of `x` (an `n × 2k` row-major buffer)
    /// by the row's angle, or by its negative when `inverse` is set.
    fn apply(&self, x: &[T], out: &mut [T], cols: usize, inverse: bool) {
        for (r, (xr, or)) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
            let c = self.cos[r];
            let s = if inverse { -self.sin[r] } else { self.sin[r] };
            for (p, q) in xr.chunks_exact(2).zip(or.chunks_exact_mut(2)) {
                q[0] = c * p[0] - s * p[1];
                q[1] = s * p[0] + c * p[1];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// How the right operand of a binary op is broadcast over the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// one value per column, repeated over rows
    Row,
    /// one value per row, repeated over columns
    Col,
    Scalar,
}

impl Bcast {
    #[inline]
    fn index(self, r: usize, c: usize, cols: usize) -> usize {
        match self {
            Bcast::Same => r * cols + c,
            Bcast::Row => c,
            Bcast::Col => r,
            Bcast::Scalar => 0,
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Binary(BinOp, Bcast, Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    GatherRows(Var, Arc<[usize]>),
    GatherCols(Var, Arc<[usize]>),
    ScatterAddRows(Var, Arc<[usize]>),
    SegmentSoftmax(Var, Arc<[usize]>),
    LeakyRelu(Var, T),
    Sum(Var),
    Mean(Var),
    RowMean(Var),
    Sqrt(Var),
    Square(Var),
    Rotate(Var, Arc<RotTable<T>>, bool),
    LogSoftmaxRows(Var),
}

struct Node<'p, T: Real> {
    value: Cow<'p, Array<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations for reverse-mode differentiation. Parameters are
/// borrowed from a [`ParamStore`] rather than copied.
pub struct Tape<'p, T: Real> {
    nodes: Vec<Node<'p, T>>,
    params: Option<&'p ParamStore<T>>,
    bound: Vec<Option<Var>>,
    grad_enabled: bool,
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: Vec<Array<T>>,
    leaves: Vec<Option<Array<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to parameter `id` (zero if unreachable).
    pub fn param(&self, id: usize) -> &Array<T> {
        &self.params[id]
    }

    pub fn params(&self) -> &[Array<T>] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Array<T>> {
        self.params
    }

    /// Gradient with respect to a leaf created by [`Tape::input`].
    pub fn wrt(&self, v: Var) -> Option<&Array<T>> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }
}

fn mismatch<T: Real>(op: &'static str, a: &Array<T>, b: &Array<T>) -> Error {
    Error::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

impl<'p, T: Real> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: None, bound: Vec::new(), grad_enabled: true }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Tape { nodes: Vec::new(), params: Some(params), bound: vec![None; params.len()], grad_enabled: true }
    }

    /// A tape that records values only; `backward` yields zero gradients.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        let mut t = Self::with_params(params);
        t.grad_enabled = false;
        t
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input; its gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Array<T>) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op: Op::Leaf, needs_grad: self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    /// Binds parameter `id` of the attached store (once per tape).
    pub fn param(&mut self, id: usize) -> Result<Var> {
        let store = self.params.ok_or_else(|| Error::InvalidArgument("tape has no parameter store".into()))?;
        if id >= store.len() {
            return Err(Error::InvalidArgument(format!("parameter {id} out of range")));
        }
        if let Some(v) = self.bound[id] {
            return Ok(v);
        }
        self.nodes.push(Node { value: Cow::Borrowed(store.get(id)), op: Op::Leaf, needs_grad: self.grad_enabled });
        let v = Var(self.nodes.len() - 1);
        self.bound[id] = Some(v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.rows() {
            return Err(mismatch("matmul", x, y));
        }
        let out = x.matmul(y)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn binary(&mut self, op: BinOp, name: &'static str, a: Var, b: Var, bc: Bcast) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let ok = match bc {
            Bcast::Same => x.shape() == y.shape(),
            Bcast::Row => y.len() == x.cols(),
            Bcast::Col => y.len() == x.rows(),
            Bcast::Scalar => y.len() == 1,
        };
        if !ok {
            return Err(mismatch(name, x, y));
        }
        let cols = x.cols().max(1);
        let mut out = x.clone();
        let yd = y.data();
        for (r, row) in out.data_mut().chunks_exact_mut(cols).enumerate() {
            for (c, o) in row.iter_mut().enumerate() {
                let w = yd[bc.index(r, c, cols)];
                *o = match op {
                    BinOp::Add => *o + w,
                    BinOp::Sub => *o - w,
                    BinOp::Mul => *o * w,
                    BinOp::Div => *o / w,
                };
            }
        }
        Ok(self.push(out, Op::Binary(op, bc, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, "add", a, b, Bcast::Same)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, "sub", a, b, Bcast::Same)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, "mul", a, b, Bcast::Same)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, "div", a, b, Bcast::Same)
    }

    /// `a + b` with `b` holding one value per column.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, "add_row", a, b, Bcast::Row)
    }

    pub fn sub_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, "sub_row", a, b, Bcast::Row)
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, "mul_row", a, b, Bcast::Row)
    }

    pub fn div_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, "div_row", a, b, Bcast::Row)
    }

    /// `a - b` with `b` holding one value per row.
    pub fn sub_col(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, "sub_col", a, b, Bcast::Col)
    }

    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, "mul_col", a, b, Bcast::Col)
    }

    pub fn div_col(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, "div_col", a, b, Bcast::Col)
    }

    pub fn mul_scalar(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, "mul_scalar", a, b, Bcast::Scalar)
    }

    pub fn div_scalar(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, "div_scalar", a, b, Bcast::Scalar)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddConst(a), &[a])
    }

    /// Concatenation along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat of nothing".into()));
        };
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(mismatch("concat", self.value(first), self.value(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Array::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Columns `start..end` of the matrix view.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.cols() {
            return Err(Error::ShapeMismatch { op: "slice_cols", lhs: x.shape().to_vec(), rhs: vec![start, end] });
        }
        let rows = x.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&x.row(r)[start..end]);
        }
        let out = Array::new(vec![rows, end - start], data)?;
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Row `idx[k]` of `a` becomes row `k` of the output.
    pub fn gather_rows(&mut self, a: Var, idx: &Arc<[usize]>) -> Result<Var> {
        let x = self.value(a);
        let rows = x.rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!("gather_rows: index {bad} out of range for {rows} rows")));
        }
        let cols = x.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx.iter() {
            data.extend_from_slice(x.row(i));
        }
        let out = Array::new(vec![idx.len(), cols], data)?;
        Ok(self.push(out, Op::GatherRows(a, idx.clone()), &[a]))
    }

    /// Column `idx[k]` of `a` becomes column `k` of the output.
    pub fn gather_cols(&mut self, a: Var, idx: &Arc<[usize]>) -> Result<Var> {
        let x = self.value(a);
        let cols = x.cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(Error::InvalidArgument(format!("gather_cols: index {bad} out of range for {cols} columns")));
        }
        let rows = x.rows();
        let mut data = Vec::with_capacity(rows * idx.len());
        for r in 0..rows {
            let row = x.row(r);
            data.extend(idx.iter().map(|&c| row[c]));
        }
        let out = Array::new(vec![rows, idx.len()], data)?;
        Ok(self.push(out, Op::GatherCols(a, idx.clone()), &[a]))
    }

    /// Row `k` of `a` is added into row `idx[k]` of an `n_out`-row output.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &Arc<[usize]>, n_out: usize) -> Result<Var> {
        let x = self.value(a);
        if idx.len() != x.rows() {
            return Err(Error::ShapeMismatch { op: "scatter_add_rows", lhs: x.shape().to_vec(), rhs: vec![idx.len()] });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(Error::InvalidArgument(format!(
                "scatter_add_rows: target {bad} out of range for {n_out} rows"
            )));
        }
        let cols = x.cols();
        let mut out = Array::zeros(vec![n_out, cols]);
        let od = out.data_mut();
        for (k, &i) in idx.iter().enumerate() {
            for (o, &v) in od[i * cols..(i + 1) * cols].iter_mut().zip(x.row(k)) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::ScatterAddRows(a, idx.clone()), &[a]))
    }

    /// Softmax of a column of logits within groups sharing a segment id.
    pub fn segment_softmax(&mut self, a: Var, seg: &Arc<[usize]>, n_seg: usize) -> Result<Var> {
        let x = self.value(a);
        if x.cols() != 1 || seg.len() != x.rows() {
            return Err(Error::ShapeMismatch {
                op: "segment_softmax",
                lhs: x.shape().to_vec(),
                rhs: vec![seg.len(), 1],
            });
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= n_seg) {
            return Err(Error::InvalidArgument(format!("segment_softmax: segment {bad} out of range for {n_seg}")));
        }
        let mut max = vec![T::neg_infinity(); n_seg];
        for (&s, &v) in seg.iter().zip(x.data()) {
            max[s] = max[s].max(v);
        }
        let mut out = x.clone();
        let mut denom = vec![T::zero(); n_seg];
        for (&s, o) in seg.iter().zip(out.data_mut()) {
            *o = (*o - max[s]).exp();
            denom[s] += *o;
        }
        for (&s, o) in seg.iter().zip(out.data_mut()) {
            *o = *o / denom[s];
        }
        Ok(self.push(out, Op::SegmentSoftmax(a, seg.clone()), &[a]))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Array::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s: T = x.data().iter().copied().sum();
        let out = Array::scalar(s / T::of(x.len().max(1) as f64));
        self.push(out, Op::Mean(a), &[a])
    }

    /// Mean over the columns of each row, shape `[rows, 1]`.
    pub fn row_mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = (x.rows(), x.cols());
        let inv = T::one() / T::of(cols.max(1) as f64);
        let data = (0..rows).map(|r| x.row(r).iter().copied().sum::<T>() * inv).collect();
        let out = Array::new(vec![rows, 1], data).expect("row count");
        self.push(out, Op::RowMean(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::sqrt);
        self.push(out, Op::Sqrt(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    /// Rotates each consecutive pair of columns of row `r` by `rot[r]`
    /// (by its inverse if `inverse`).
    pub fn rotate(&mut self, a: Var, rot: &Arc<RotTable<T>>, inverse: bool) -> Result<Var> {
        let x = self.value(a);
        if !x.cols().is_multiple_of(2) || rot.len() != x.rows() {
            return Err(Error::ShapeMismatch { op: "rotate", lhs: x.shape().to_vec(), rhs: vec![rot.len(), 2] });
        }
        count_rotation_op();
        let mut out = Array::zeros(x.shape().to_vec());
        rot.apply(x.data(), out.data_mut(), x.cols(), inverse);
        Ok(self.push(out, Op::Rotate(a, rot.clone(), inverse), &[a]))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(cols.max(1)) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a), &[a])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::InvalidArgument(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Array<T>>> = vec![None; n];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Array::full(lv.shape().to_vec(), T::one()));
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads)?;
        }
        let mut params: Vec<Array<T>> = Vec::new();
        if let Some(store) = self.params {
            params = (0..store.len())
                .map(|id| {
                    self.bound[id]
                        .and_then(|v| grads.get(v.0).and_then(|g| g.clone()))
                        .unwrap_or_else(|| Array::zeros(store.get(id).shape().to_vec()))
                })
                .collect();
        }
        Ok(Gradients { params, leaves: grads })
    }

    fn backprop(&self, i: usize, g: &Array<T>, grads: &mut [Option<Array<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &*node.value;
        let acc = |v: Var, grads: &mut [Option<Array<T>>], f: &mut dyn FnMut(&mut Array<T>)| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = &mut grads[v.0];
            if slot.is_none() {
                *slot = Some(Array::zeros(self.nodes[v.0].value.shape().to_vec()));
            }
            f(slot.as_mut().unwrap());
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (x, w) = (self.value(*a), self.value(*b));
                let (m, k, nn) = (x.rows(), x.cols(), w.cols());
                acc(*a, grads, &mut |ga| gemm_into(false, true, T::one(), g, w, ga.data_mut(), m, nn, k));
                acc(*b, grads, &mut |gb| gemm_into(true, false, T::one(), x, g, gb.data_mut(), k, m, nn));
            }
            Op::Binary(op, bc, a, b) => {
                let (x, w) = (self.value(*a), self.value(*b));
                let cols = x.cols().max(1);
                let (gd, xd, wd, yd) = (g.data(), x.data(), w.data(), y.data());
                acc(*a, grads, &mut |ga| {
                    for (r, row) in ga.data_mut().chunks_exact_mut(cols).enumerate() {
                        for (c, o) in row.iter_mut().enumerate() {
                            let k = r * cols + c;
                            *o += match op {
                                BinOp::Add | BinOp::Sub => gd[k],
                                BinOp::Mul => gd[k] * wd[bc.index(r, c, cols)],
                                BinOp::Div => gd[k] / wd[bc.index(r, c, cols)],
                            };
                        }
                    }
                });
                acc(*b, grads, &mut |gb| {
                    let gbd = gb.data_mut();
                    for r in 0..gd.len() / cols {
                        for c in 0..cols {
                            let (k, j) = (r * cols + c, bc.index(r, c, cols));
                            gbd[j] += match op {
                                BinOp::Add => gd[k],
                                BinOp::Sub => -gd[k],
                                BinOp::Mul => gd[k] * xd[k],
                                BinOp::Div => -gd[k] * yd[k] / wd[j],
                            };
                        }
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, grads, &mut |ga| ga.axpy(*c, g)),
            Op::AddConst(a) | Op::Reshape(a) => acc(*a, grads, &mut |ga| ga.axpy(T::one(), g)),
            Op::Concat(parts) => {
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, grads, &mut |gp| {
                        for (r, row) in gp.data_mut().chunks_exact_mut(w.max(1)).enumerate() {
                            for (o, &v) in row.iter_mut().zip(&g.data()[r * total + off..r * total + off + w]) {
                                *o += v;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let w = g.cols();
                let cols = self.value(*a).cols();
                acc(*a, grads, &mut |ga| {
                    if w == 0 {
                        return;
                    }
                    for (r, grow) in g.data().chunks_exact(w).enumerate() {
                        for (o, &v) in ga.data_mut()[r * cols + start..r * cols + start + w].iter_mut().zip(grow) {
                            *o += v;
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let cols = g.cols();
                acc(*a, grads, &mut |ga| {
                    let gad = ga.data_mut();
                    for (k, &r) in idx.iter().enumerate() {
                        for (o, &v) in gad[r * cols..(r + 1) * cols].iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::GatherCols(a, idx) => {
                let cols = self.value(*a).cols();
                let w = idx.len();
                acc(*a, grads, &mut |ga| {
                    if w == 0 {
                        return;
                    }
                    for (grow, orow) in g.data().chunks_exact(w).zip(ga.data_mut().chunks_exact_mut(cols)) {
                        for (&c, &v) in idx.iter().zip(grow) {
                            orow[c] += v;
                        }
                    }
                });
            }
            Op::ScatterAddRows(a, idx) => {
                let cols = g.cols();
                acc(*a, grads, &mut |ga| {
                    let gad = ga.data_mut();
                    for (k, &r) in idx.iter().enumerate() {
                        for (o, &v) in gad[k * cols..(k + 1) * cols].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::SegmentSoftmax(a, seg) => {
                let n_seg = seg.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![T::zero(); n_seg];
                for ((&s, &gv), &yv) in seg.iter().zip(g.data()).zip(y.data()) {
                    dot[s] += gv * yv;
                }
                acc(*a, grads, &mut |ga| {
                    for (k, o) in ga.data_mut().iter_mut().enumerate() {
                        *o += y.data()[k] * (g.data()[k] - dot[seg[k]]);
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                acc(*a, grads, &mut |ga| {
                    for ((o, &gv), &xv) in ga.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        *o += if xv > T::zero() { gv } else { *slope * gv };
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g.item();
                acc(*a, grads, &mut |ga| ga.data_mut().iter_mut().for_each(|o| *o += gv));
            }
            Op::Mean(a) => {
                let gv = g.item() / T::of(self.value(*a).len().max(1) as f64);
                acc(*a, grads, &mut |ga| ga.data_mut().iter_mut().for_each(|o| *o += gv));
            }
            Op::RowMean(a) => {
                let cols = self.value(*a).cols();
                let inv = T::one() / T::of(cols.max(1) as f64);
                acc(*a, grads, &mut |ga| {
                    for (k, o) in ga.data_mut().iter_mut().enumerate() {
                        *o += g.data()[k / cols] * inv;
                    }
                });
            }
            Op::Sqrt(a) => acc(*a, grads, &mut |ga| {
                let half = T::of(0.5);
                for ((o, &gv), &yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *o += half * gv / yv;
                }
            }),
            Op::Square(a) => {
                let x = self.value(*a);
                acc(*a, grads, &mut |ga| {
                    let two = T::of(2.0);
                    for ((o, &gv), &xv) in ga.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        *o += two * gv * xv;
                    }
                });
            }
            Op::Rotate(a, rot, inverse) => {
                let cols = g.cols();
                let mut back = vec![T::zero(); g.len()];
                rot.apply(g.data(), &mut back, cols, !inverse);
                acc(*a, grads, &mut |ga| {
                    for (o, v) in ga.data_mut().iter_mut().zip(&back) {
                        *o += *v;
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let cols = g.cols().max(1);
                acc(*a, grads, &mut |ga| {
                    for ((orow, grow), yrow) in ga
                        .data_mut()
                        .chunks_exact_mut(cols)
                        .zip(g.data().chunks_exact(cols))
                        .zip(y.data().chunks_exact(cols))
                    {
                        let gs: T = grow.iter().copied().sum();
                        for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += gv - yv.exp() * gs;
                        }
                    }
                });
            }
        }
        Ok(())
    }
}
