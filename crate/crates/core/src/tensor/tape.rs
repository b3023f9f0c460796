//! Wengert tape: ops append nodes in execution order, so walking the arena
//! backwards is a topological replay that visits each node exactly once.
//!
//! A tape is confined to one logical thread. Node values are immutable after
//! construction; only gradient accumulators mutate, and only during
//! `backward`.

use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op<T> {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    AddRowVec { x: usize, v: usize },
    Scale { x: usize, c: T },
    MulScalar { s: usize, x: usize },
    Exp { x: usize },
    Log { x: usize },
    Sqrt { x: usize },
    Tanh { x: usize },
    Sigmoid { x: usize },
    Relu { x: usize },
    Clamp { x: usize, lo: T, hi: T },
    Softmax { x: usize, axis: usize, mask: Option<Vec<bool>> },
    Concat { axis: usize, parts: Vec<usize> },
    Slice { x: usize, axis: usize, start: usize },
    Reshape { x: usize },
    ReduceSum { x: usize, axis: usize },
    ReduceMean { x: usize, axis: usize },
    ReduceMax { x: usize, axis: usize, argmax: Vec<usize> },
    Gather { table: usize, ids: Arc<Vec<usize>> },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: T },
    ZeroRows { x: usize, valid: Vec<bool> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    needs_grad: bool,
    grad: Option<Vec<T>>,
}

/// Reverse-mode differentiation tape over rank ≤ 2 tensors.
#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

// Rows/cols of a tensor viewed as a matrix: rank 0 → 1×1, rank 1 → 1×n.
fn as_2d(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [m, n] => (*m, *n),
        _ => unreachable!("rank checked at construction"),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node, releasing all intermediates. Data shared with the
    /// caller (e.g. parameter arrays) survives through its own `Arc`s.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> TensorId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient (inputs, masks, lookup tables).
    pub fn constant(&mut self, value: Tensor<T>) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by the latest `backward`, if any reached `id`.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, id: TensorId) -> Option<Tensor<T>> {
        let node = &self.nodes[id.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> TensorId {
        let needs_grad = requires_grad || self.op_needs_grad(&op);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            needs_grad,
            grad: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn op_needs_grad(&self, op: &Op<T>) -> bool {
        let mut needs = false;
        self.for_each_parent(op, |p| needs |= self.nodes[p].needs_grad);
        needs
    }

    fn for_each_parent(&self, op: &Op<T>, mut f: impl FnMut(usize)) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::Div { a, b } => {
                f(*a);
                f(*b);
            }
            Op::AddRowVec { x, v } => {
                f(*x);
                f(*v);
            }
            Op::MulScalar { s, x } => {
                f(*s);
                f(*x);
            }
            Op::LayerNorm { x, gain, bias, .. } => {
                f(*x);
                f(*gain);
                f(*bias);
            }
            Op::Concat { parts, .. } => {
                for p in parts {
                    f(*p);
                }
            }
            Op::Gather { table, .. } => f(*table),
            Op::Transpose { x }
            | Op::Scale { x, .. }
            | Op::Exp { x }
            | Op::Log { x }
            | Op::Sqrt { x }
            | Op::Tanh { x }
            | Op::Sigmoid { x }
            | Op::Relu { x }
            | Op::Clamp { x, .. }
            | Op::Softmax { x, .. }
            | Op::Slice { x, .. }
            | Op::Reshape { x }
            | Op::ReduceSum { x, .. }
            | Op::ReduceMean { x, .. }
            | Op::ReduceMax { x, .. }
            | Op::ZeroRows { x, .. } => f(*x),
        }
    }

    fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: TensorId) -> &[T] {
        self.nodes[id.0].value.data()
    }

    // ── binary elementwise ───────────────────────────────────────────

    fn check_same_shape(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("add", a, b)?;
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, false))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("sub", a, b)?;
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Sub { a: a.0, b: b.0 }, false))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("mul", a, b)?;
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, false))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("div", a, b)?;
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x / y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Div { a: a.0, b: b.0 }, false))
    }

    /// `x[i,j] + v[j]`: the one non-scalar broadcast the suite allows.
    pub fn add_rowvec(&mut self, x: TensorId, v: TensorId) -> Result<TensorId, TensorError> {
        let (xs, vs) = (self.shape(x).to_vec(), self.shape(v).to_vec());
        if xs.len() != 2 || vs.len() != 1 || xs[1] != vs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_rowvec",
                lhs: xs,
                rhs: vs,
            });
        }
        let n = vs[0];
        let vd = self.data(v);
        let data: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &e)| e + vd[i % n])
            .collect();
        let value = Tensor::new(xs, data)?;
        Ok(self.push(value, Op::AddRowVec { x: x.0, v: v.0 }, false))
    }

    pub fn scale(&mut self, x: TensorId, c: T) -> Result<TensorId, TensorError> {
        let data: Vec<T> = self.data(x).iter().map(|&e| e * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::Scale { x: x.0, c }, false))
    }

    /// One-element tensor `s` times every element of `x` (e.g. γ·M).
    pub fn mul_scalar(&mut self, s: TensorId, x: TensorId) -> Result<TensorId, TensorError> {
        if self.nodes[s.0].value.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.shape(s).to_vec(),
            });
        }
        let sv = self.data(s)[0];
        let data: Vec<T> = self.data(x).iter().map(|&e| sv * e).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::MulScalar { s: s.0, x: x.0 }, false))
    }

    // ── unary elementwise ────────────────────────────────────────────

    fn unary(
        &mut self,
        x: TensorId,
        f: impl Fn(T) -> T,
        op: impl FnOnce(usize) -> Op<T>,
    ) -> Result<TensorId, TensorError> {
        let data: Vec<T> = self.data(x).iter().map(|&e| f(e)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, op(x.0), false))
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary(x, |e| e.exp(), |x| Op::Exp { x })
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary(x, |e| e.ln(), |x| Op::Log { x })
    }

    pub fn sqrt(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary(x, |e| e.sqrt(), |x| Op::Sqrt { x })
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary(x, |e| e.tanh(), |x| Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let one = T::one();
        self.unary(
            x,
            |e| one / (one + (-e).exp()),
            |x| Op::Sigmoid { x },
        )
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.unary(x, |e| e.max(T::zero()), |x| Op::Relu { x })
    }

    pub fn clamp(&mut self, x: TensorId, lo: T, hi: T) -> Result<TensorId, TensorError> {
        self.unary(x, |e| e.max(lo).min(hi), |x| Op::Clamp { x, lo, hi })
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_kernel(self.data(a), self.data(b), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(value, Op::Matmul { a: a.0, b: b.0 }, false))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(TensorError::BadShape {
                op: "transpose",
                shape: s.to_vec(),
            });
        }
        let (m, n) = (s[0], s[1]);
        let data = transpose_kernel(self.data(x), m, n);
        let value = Tensor::new(vec![n, m], data)?;
        Ok(self.push(value, Op::Transpose { x: x.0 }, false))
    }

    // ── softmax ──────────────────────────────────────────────────────

    /// Softmax along `axis`. `mask`, when present, has one entry per
    /// position along that axis (shared by every slice): masked positions
    /// contribute exactly 0 and receive no mass. A slice whose positions
    /// are all masked yields all zeros; this is defined behaviour, not an
    /// error.
    pub fn softmax(
        &mut self,
        x: TensorId,
        axis: usize,
        mask: Option<&[bool]>,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len().max(1) {
            return Err(TensorError::AxisOutOfRange {
                op: "softmax",
                axis,
                shape,
            });
        }
        let along = if shape.is_empty() { 1 } else { shape[axis] };
        if let Some(m) = mask {
            if m.len() != along {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax mask",
                    lhs: shape,
                    rhs: vec![m.len()],
                });
            }
        }
        let data = softmax_kernel(self.data(x), &shape, axis, mask);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Softmax {
                x: x.0,
                axis,
                mask: mask.map(<[bool]>::to_vec),
            },
            false,
        ))
    }

    // ── shape ops ────────────────────────────────────────────────────

    pub fn concat(&mut self, axis: usize, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::BadShape {
                op: "concat",
                shape: vec![],
            });
        }
        let rank = self.shape(parts[0]).len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                shape: self.shape(parts[0]).to_vec(),
            });
        }
        let mut out_shape = self.shape(parts[0]).to_vec();
        for &p in &parts[1..] {
            let s = self.shape(p);
            if s.len() != rank
                || s.iter()
                    .zip(&out_shape)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: out_shape,
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let data = match (rank, axis) {
            (1, 0) => {
                let mut data = Vec::new();
                for &p in parts {
                    data.extend_from_slice(self.data(p));
                }
                data
            }
            (2, 0) => {
                let mut data = Vec::new();
                for &p in parts {
                    data.extend_from_slice(self.data(p));
                }
                data
            }
            (2, 1) => {
                let m = out_shape[0];
                let mut data = Vec::with_capacity(m * out_shape[1]);
                for i in 0..m {
                    for &p in parts {
                        let n = self.shape(p)[1];
                        data.extend_from_slice(&self.data(p)[i * n..(i + 1) * n]);
                    }
                }
                data
            }
            _ => {
                return Err(TensorError::BadShape {
                    op: "concat",
                    shape: out_shape,
                })
            }
        };
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                axis,
                parts: parts.iter().map(|p| p.0).collect(),
            },
            false,
        ))
    }

    pub fn slice(
        &mut self,
        x: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "slice",
                axis,
                shape,
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                bound: shape[axis],
            });
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let data = match (shape.len(), axis) {
            (1, 0) => self.data(x)[start..start + len].to_vec(),
            (2, 0) => {
                let n = shape[1];
                self.data(x)[start * n..(start + len) * n].to_vec()
            }
            (2, 1) => {
                let (m, n) = (shape[0], shape[1]);
                let src = self.data(x);
                let mut data = Vec::with_capacity(m * len);
                for i in 0..m {
                    data.extend_from_slice(&src[i * n + start..i * n + start + len]);
                }
                data
            }
            _ => unreachable!(),
        };
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Slice {
                x: x.0,
                axis,
                start,
            },
            false,
        ))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.numel() || shape.len() > super::MAX_RANK {
            return Err(TensorError::BadShape { op: "reshape", shape });
        }
        let value = Tensor::from_shared(shape, self.nodes[x.0].value.shared_data())?;
        Ok(self.push(value, Op::Reshape { x: x.0 }, false))
    }

    // ── reductions ───────────────────────────────────────────────────

    fn reduce_shape(
        &self,
        op: &'static str,
        x: TensorId,
        axis: usize,
    ) -> Result<Vec<usize>, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { op, axis, shape });
        }
        let mut out = shape;
        out.remove(axis);
        Ok(out)
    }

    pub fn reduce_sum(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let out_shape = self.reduce_shape("reduce_sum", x, axis)?;
        let (m, n) = as_2d(self.shape(x));
        let src = self.data(x);
        let data = if self.shape(x).len() == 1 || axis == 1 {
            // sum within each row
            (0..m)
                .map(|i| src[i * n..(i + 1) * n].iter().copied().fold(T::zero(), |s, v| s + v))
                .collect()
        } else {
            // axis == 0: sum down each column
            let mut acc = vec![T::zero(); n];
            for i in 0..m {
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += src[i * n + j];
                }
            }
            acc
        };
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::ReduceSum { x: x.0, axis }, false))
    }

    pub fn reduce_mean(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let out_shape = self.reduce_shape("reduce_mean", x, axis)?;
        let inv = T::one() / T::from_f64(self.shape(x)[axis] as f64);
        let sum = self.reduce_sum(x, axis)?;
        // recorded as sum followed by scale keeps adjoints trivial
        let data: Vec<T> = self.data(sum).iter().map(|&v| v * inv).collect();
        let value = Tensor::new(out_shape, data)?;
        let _ = sum; // sum node stays on the tape; mean references it
        Ok(self.push(value, Op::Scale { x: sum.0, c: inv }, false))
    }

    /// Max along `axis`; ties route the gradient to the first maximal index.
    pub fn reduce_max(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let out_shape = self.reduce_shape("reduce_max", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (m, n) = as_2d(&shape);
        let src = self.data(x);
        let rowwise = shape.len() == 1 || axis == 1;
        let slices = if rowwise { m } else { n };
        let mut data = Vec::with_capacity(slices);
        let mut argmax = Vec::with_capacity(slices);
        for s in 0..slices {
            let count = if rowwise { n } else { m };
            let mut best = T::neg_infinity();
            let mut best_i = 0;
            for i in 0..count {
                let v = if rowwise { src[s * n + i] } else { src[i * n + s] };
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            data.push(best);
            argmax.push(best_i);
        }
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::ReduceMax { x: x.0, axis, argmax }, false))
    }

    // ── structured ops ───────────────────────────────────────────────

    /// Rows of `table` selected by `ids`; backward scatter-adds.
    pub fn embedding_gather(
        &mut self,
        table: TensorId,
        ids: &[usize],
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "embedding_gather",
                shape,
            });
        }
        let (vocab, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding_gather",
                index: bad,
                bound: vocab,
            });
        }
        if ids.is_empty() {
            return Err(TensorError::BadShape {
                op: "embedding_gather",
                shape: vec![0],
            });
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table: table.0,
                ids: Arc::new(ids.to_vec()),
            },
            false,
        ))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: T,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "layer_norm",
                shape,
            });
        }
        let (m, n) = (shape[0], shape[1]);
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let inv_n = T::one() / T::from_f64(n as f64);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().copied().fold(T::zero(), |s, v| s + v) * inv_n;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .fold(T::zero(), |s, v| s + v)
                * inv_n;
            let inv_std = T::one() / (var + eps).sqrt();
            for j in 0..n {
                data.push((row[j] - mean) * inv_std * g[j] + b[j]);
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
            false,
        ))
    }

    /// Keeps rows where `valid` is true, zeroes the rest.
    pub fn zero_rows(&mut self, x: TensorId, valid: &[bool]) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || valid.len() != shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "zero_rows",
                lhs: shape,
                rhs: vec![valid.len()],
            });
        }
        let n = shape[1];
        let src = self.data(x);
        let mut data = Vec::with_capacity(src.len());
        for (i, &keep) in valid.iter().enumerate() {
            if keep {
                data.extend_from_slice(&src[i * n..(i + 1) * n]);
            } else {
                data.extend(std::iter::repeat(T::zero()).take(n));
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::ZeroRows {
                x: x.0,
                valid: valid.to_vec(),
            },
            false,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep seeding `loss` (which must hold exactly one element)
    /// with 1. Gradients accumulate additively across fan-out; every
    /// `requires_grad` leaf reachable from `loss` ends up with a populated
    /// gradient.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.backward_seeded(loss, &[T::one()])
    }

    /// Reverse sweep with an explicit upstream gradient for `root`.
    pub fn backward_seeded(&mut self, root: TensorId, seed: &[T]) -> Result<(), TensorError> {
        if seed.len() != self.nodes[root.0].value.numel() {
            return Err(TensorError::LengthMismatch {
                len: seed.len(),
                shape: self.shape(root).to_vec(),
            });
        }
        match &mut self.nodes[root.0].grad {
            Some(g) => {
                for (gi, si) in g.iter_mut().zip(seed) {
                    *gi += *si;
                }
            }
            None => self.nodes[root.0].grad = Some(seed.to_vec()),
        }
        for i in (0..=root.0).rev() {
            self.step_backward(i);
        }
        Ok(())
    }

    fn step_backward(&mut self, i: usize) {
        if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
            return;
        }
        let (parents, rest) = self.nodes.split_at_mut(i);
        let node = &rest[0];
        let g = node.grad.as_ref().expect("checked above");
        let out_val = node.value.data();
        let out_shape = node.value.shape();

        // Each arm computes every parent contribution from immutable reads,
        // then writes them through `accum_into` (one parent at a time).
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                accum_into(parents, *a, g);
                accum_into(parents, *b, g);
            }
            Op::Sub { a, b } => {
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                accum_into(parents, *a, g);
                accum_into(parents, *b, &neg);
            }
            Op::Mul { a, b } => {
                let da: Vec<T> = g
                    .iter()
                    .zip(parents[*b].value.data())
                    .map(|(&gv, &bv)| gv * bv)
                    .collect();
                let db: Vec<T> = g
                    .iter()
                    .zip(parents[*a].value.data())
                    .map(|(&gv, &av)| gv * av)
                    .collect();
                accum_into(parents, *a, &da);
                accum_into(parents, *b, &db);
            }
            Op::Div { a, b } => {
                let ad = parents[*a].value.data();
                let bd = parents[*b].value.data();
                let da: Vec<T> = g.iter().zip(bd).map(|(&gv, &bv)| gv / bv).collect();
                let db: Vec<T> = g
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                    .collect();
                accum_into(parents, *a, &da);
                accum_into(parents, *b, &db);
            }
            Op::AddRowVec { x, v } => {
                let n = parents[*v].value.numel();
                let mut dv = vec![T::zero(); n];
                for (i, &gv) in g.iter().enumerate() {
                    dv[i % n] += gv;
                }
                accum_into(parents, *x, g);
                accum_into(parents, *v, &dv);
            }
            Op::Scale { x, c } => {
                let dx: Vec<T> = g.iter().map(|&gv| gv * *c).collect();
                accum_into(parents, *x, &dx);
            }
            Op::MulScalar { s, x } => {
                let xd = parents[*x].value.data();
                let ds = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| gv * xv)
                    .fold(T::zero(), |acc, v| acc + v);
                let sv = parents[*s].value.data()[0];
                let dx: Vec<T> = g.iter().map(|&gv| gv * sv).collect();
                accum_into(parents, *s, &[ds]);
                accum_into(parents, *x, &dx);
            }
            Op::Exp { x } => {
                let dx: Vec<T> = g.iter().zip(out_val).map(|(&gv, &ov)| gv * ov).collect();
                accum_into(parents, *x, &dx);
            }
            Op::Log { x } => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(parents[*x].value.data())
                    .map(|(&gv, &xv)| gv / xv)
                    .collect();
                accum_into(parents, *x, &dx);
            }
            Op::Sqrt { x } => {
                let half = T::from_f64(0.5);
                let dx: Vec<T> = g
                    .iter()
                    .zip(out_val)
                    .map(|(&gv, &ov)| gv * half / ov)
                    .collect();
                accum_into(parents, *x, &dx);
            }
            Op::Tanh { x } => {
                let one = T::one();
                let dx: Vec<T> = g
                    .iter()
                    .zip(out_val)
                    .map(|(&gv, &ov)| gv * (one - ov * ov))
                    .collect();
                accum_into(parents, *x, &dx);
            }
            Op::Sigmoid { x } => {
                let one = T::one();
                let dx: Vec<T> = g
                    .iter()
                    .zip(out_val)
                    .map(|(&gv, &ov)| gv * ov * (one - ov))
                    .collect();
                accum_into(parents, *x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(parents[*x].value.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                accum_into(parents, *x, &dx);
            }
            Op::Clamp { x, lo, hi } => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(parents[*x].value.data())
                    .map(|(&gv, &xv)| {
                        if xv >= *lo && xv <= *hi {
                            gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                accum_into(parents, *x, &dx);
            }
            Op::Matmul { a, b } => {
                let (m, k) = as_2d(parents[*a].value.shape());
                let n = as_2d(parents[*b].value.shape()).1;
                let ad = parents[*a].value.data();
                let bd = parents[*b].value.data();
                // dA = G · Bᵀ ; dB = Aᵀ · G
                let bt = transpose_kernel(bd, k, n);
                let da = matmul_kernel(g, &bt, m, n, k);
                let at = transpose_kernel(ad, m, k);
                let db = matmul_kernel(&at, g, k, m, n);
                accum_into(parents, *a, &da);
                accum_into(parents, *b, &db);
            }
            Op::Transpose { x } => {
                let (m, n) = as_2d(out_shape);
                let dx = transpose_kernel(g, m, n);
                accum_into(parents, *x, &dx);
            }
            Op::Softmax { x, axis, mask } => {
                let shape = parents[*x].value.shape().to_vec();
                let dx = softmax_backward(g, out_val, &shape, *axis, mask.as_deref());
                accum_into(parents, *x, &dx);
            }
            Op::Concat { axis, parts } => match (out_shape.len(), *axis) {
                (1, 0) | (2, 0) => {
                    let mut offset = 0;
                    for &p in parts {
                        let sz = parents[p].value.numel();
                        let dp = g[offset..offset + sz].to_vec();
                        accum_into(parents, p, &dp);
                        offset += sz;
                    }
                }
                (2, 1) => {
                    let m = out_shape[0];
                    let total_n = out_shape[1];
                    let mut col = 0;
                    for &p in parts {
                        let n = parents[p].value.shape()[1];
                        let mut dp = Vec::with_capacity(m * n);
                        for i in 0..m {
                            dp.extend_from_slice(&g[i * total_n + col..i * total_n + col + n]);
                        }
                        accum_into(parents, p, &dp);
                        col += n;
                    }
                }
                _ => unreachable!(),
            },
            Op::Slice { x, axis, start } => {
                let shape = parents[*x].value.shape().to_vec();
                let mut dx = vec![T::zero(); parents[*x].value.numel()];
                match (shape.len(), *axis) {
                    (1, 0) => dx[*start..*start + g.len()].copy_from_slice(g),
                    (2, 0) => {
                        let n = shape[1];
                        dx[*start * n..*start * n + g.len()].copy_from_slice(g);
                    }
                    (2, 1) => {
                        let (m, n) = (shape[0], shape[1]);
                        let len = out_shape[1];
                        for i in 0..m {
                            dx[i * n + start..i * n + start + len]
                                .copy_from_slice(&g[i * len..(i + 1) * len]);
                        }
                    }
                    _ => unreachable!(),
                }
                accum_into(parents, *x, &dx);
            }
            Op::Reshape { x } => {
                accum_into(parents, *x, g);
            }
            Op::ReduceSum { x, axis } => {
                let shape = parents[*x].value.shape().to_vec();
                let (m, n) = as_2d(&shape);
                let rowwise = shape.len() == 1 || *axis == 1;
                let mut dx = vec![T::zero(); m * n];
                if rowwise {
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = g[i];
                        }
                    }
                } else {
                    for i in 0..m {
                        dx[i * n..(i + 1) * n].copy_from_slice(g);
                    }
                }
                accum_into(parents, *x, &dx);
            }
            Op::ReduceMean { .. } => unreachable!("mean is recorded as sum+scale"),
            Op::ReduceMax { x, axis, argmax } => {
                let shape = parents[*x].value.shape().to_vec();
                let (m, n) = as_2d(&shape);
                let rowwise = shape.len() == 1 || *axis == 1;
                let mut dx = vec![T::zero(); m * n];
                for (s, &am) in argmax.iter().enumerate() {
                    let idx = if rowwise { s * n + am } else { am * n + s };
                    dx[idx] = g[s];
                }
                accum_into(parents, *x, &dx);
            }
            Op::Gather { table, ids } => {
                let shape = parents[*table].value.shape().to_vec();
                let d = shape[1];
                let mut dt = vec![T::zero(); shape[0] * d];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[row * d + j];
                    }
                }
                accum_into(parents, *table, &dt);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let shape = parents[*x].value.shape().to_vec();
                let (m, n) = (shape[0], shape[1]);
                let xd = parents[*x].value.data();
                let gd = parents[*gain].value.data();
                let inv_n = T::one() / T::from_f64(n as f64);
                let mut dx = vec![T::zero(); m * n];
                let mut dgain = vec![T::zero(); n];
                let mut dbias = vec![T::zero(); n];
                for i in 0..m {
                    let row = &xd[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let mean = row.iter().copied().fold(T::zero(), |s, v| s + v) * inv_n;
                    let var = row
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .fold(T::zero(), |s, v| s + v)
                        * inv_n;
                    let inv_std = T::one() / (var + *eps).sqrt();
                    // dxhat_j = g_j * gain_j; then the standard two-correction form
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..n {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = grow[j] * gd[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgain[j] += grow[j] * xhat;
                        dbias[j] += grow[j];
                    }
                    for j in 0..n {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = grow[j] * gd[j];
                        dx[i * n + j] =
                            inv_std * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                    }
                }
                accum_into(parents, *x, &dx);
                accum_into(parents, *gain, &dgain);
                accum_into(parents, *bias, &dbias);
            }
            Op::ZeroRows { x, valid } => {
                let n = out_shape[1];
                let mut dx = vec![T::zero(); g.len()];
                for (i, &keep) in valid.iter().enumerate() {
                    if keep {
                        dx[i * n..(i + 1) * n].copy_from_slice(&g[i * n..(i + 1) * n]);
                    }
                }
                accum_into(parents, *x, &dx);
            }
        }
    }
}

/// Adds `contrib` into parent `p`'s gradient accumulator (skipped for
/// subgraphs that no tracked leaf feeds).
fn accum_into<T: Scalar>(parents: &mut [Node<T>], p: usize, contrib: &[T]) {
    let parent = &mut parents[p];
    if !parent.needs_grad {
        return;
    }
    match &mut parent.grad {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += *c;
            }
        }
        None => parent.grad = Some(contrib.to_vec()),
    }
}

// ── kernels ──────────────────────────────────────────────────────────

fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for (i, crow) in c.chunks_exact_mut(n).enumerate() {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn transpose_kernel<T: Scalar>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

/// Max-subtracted softmax over slices along `axis`; masked positions are
/// treated as -inf logits and come out exactly 0.
fn softmax_kernel<T: Scalar>(
    src: &[T],
    shape: &[usize],
    axis: usize,
    mask: Option<&[bool]>,
) -> Vec<T> {
    let (m, n) = as_2d(shape);
    let rowwise = shape.len() <= 1 || axis == 1;
    let (slices, along) = if rowwise { (m, n) } else { (n, m) };
    let at = |s: usize, i: usize| if rowwise { s * n + i } else { i * n + s };
    let mut out = vec![T::zero(); src.len()];
    for s in 0..slices {
        let live = |i: usize| mask.map_or(true, |mk| mk[i]);
        let mut max = T::neg_infinity();
        for i in 0..along {
            if live(i) && src[at(s, i)] > max {
                max = src[at(s, i)];
            }
        }
        if max == T::neg_infinity() {
            continue; // fully masked slice: all zeros
        }
        let mut denom = T::zero();
        for i in 0..along {
            if live(i) {
                let e = (src[at(s, i)] - max).exp();
                out[at(s, i)] = e;
                denom += e;
            }
        }
        for i in 0..along {
            if live(i) {
                out[at(s, i)] = out[at(s, i)] / denom;
            }
        }
    }
    out
}

fn softmax_backward<T: Scalar>(
    g: &[T],
    out: &[T],
    shape: &[usize],
    axis: usize,
    mask: Option<&[bool]>,
) -> Vec<T> {
    let (m, n) = as_2d(shape);
    let rowwise = shape.len() <= 1 || axis == 1;
    let (slices, along) = if rowwise { (m, n) } else { (n, m) };
    let at = |s: usize, i: usize| if rowwise { s * n + i } else { i * n + s };
    let mut dx = vec![T::zero(); g.len()];
    for s in 0..slices {
        let live = |i: usize| mask.map_or(true, |mk| mk[i]);
        let mut dot = T::zero();
        for i in 0..along {
            if live(i) {
                dot += g[at(s, i)] * out[at(s, i)];
            }
        }
        for i in 0..along {
            if live(i) {
                dx[at(s, i)] = out[at(s, i)] * (g[at(s, i)] - dot);
            }
        }
    }
    dx
}
