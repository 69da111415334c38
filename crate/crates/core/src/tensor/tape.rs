use std::collections::BTreeMap;

use super::{shape_err, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    LogFloor(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    LogSigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    L2Norm(Var),
    Conv1d { input: Var, weight: Var, bias: Var, window: usize },
    MaxOverTime { input: Var, argmax: Vec<usize> },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    /// Present only when the node takes part in differentiation.
    pub(crate) op: Option<Op>,
}

impl<T> Node<T> {
    pub(crate) fn requires_grad(&self) -> bool {
        self.op.is_some()
    }
}

/// Execution record for reverse-mode differentiation.
///
/// Every value produced through the tape is stored so `Var` handles stay
/// valid; an operation is recorded for replay only when at least one of its
/// inputs requires a gradient. Node order is execution order, which is also a
/// topological order of the graph.
pub struct Tape<T = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) params: BTreeMap<String, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Interprets a rank-2 or rank-3 shape as (batch, time, channels).
fn btc(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    match *shape {
        [t, c] => Ok((1, t, c)),
        [b, t, c] => Ok((b, t, c)),
        _ => Err(shape_err(op, format!("expected [T, C] or [B, T, C], got {shape:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded (differentiable) operations, leaves excluded.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Some(ref op) if !matches!(op, Op::Leaf)))
            .count()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad()
    }

    pub(crate) fn check(&self, v: Var) -> Result<(), TensorError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar(v.0))
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Option<Op>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, inputs: &[Var], op: Op) -> Var {
        let grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad());
        self.push(value, grad.then_some(op))
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, None)
    }

    /// An unnamed leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Some(Op::Leaf))
    }

    /// A named trainable leaf. Names must be unique within a tape.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var {
        let v = self.leaf(value);
        let previous = self.params.insert(name.to_string(), v);
        assert!(previous.is_none(), "parameter {name} registered twice");
        v
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(shape_err("matmul", format!("cannot multiply {sa:?} by {sb:?}"))),
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.record(Tensor::new(vec![m, n], out)?, &[a, b], Op::MatMul(a, b)))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = match *self.shape(a) {
            [r, c] => (r, c),
            ref s => return Err(shape_err("transpose", format!("expected rank 2, got {s:?}"))),
        };
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.record(Tensor::new(vec![c, r], out)?, &[a], Op::Transpose(a)))
    }

    // ── elementwise binary ──────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) == self.shape(b) {
            Ok(())
        } else {
            Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))))
        }
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shapes checked")
    }

    /// Elementwise sum. `b` may also be a vector matching the last dimension
    /// of `a`, in which case it is added to every row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) == self.shape(b) {
            let out = self.zip(a, b, |x, y| x + y);
            return Ok(self.record(out, &[a, b], Op::Add(a, b)));
        }
        let (sa, sb) = (self.shape(a), self.shape(b));
        match (sa.last(), sb) {
            (Some(&n), [m]) if n == *m && sa.len() >= 2 => {
                let row = self.value(b).data();
                let mut out = self.value(a).clone();
                for chunk in out.data_mut().chunks_mut(n) {
                    chunk.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                }
                Ok(self.record(out, &[a, b], Op::AddRow(a, b)))
            }
            _ => Err(shape_err("add", format!("{sa:?} vs {sb:?}"))),
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        Ok(self.record(out, &[a, b], Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        Ok(self.record(out, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let k = T::of_f64(c);
        let out = self.map(a, |x| x * k);
        self.record(out, &[a], Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    // ── elementwise unary ───────────────────────────────────────────

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.map(a, T::exp);
        self.record(out, &[a], Op::Exp(a))
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > T::zero())) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let out = self.map(a, T::ln);
        Ok(self.record(out, &[a], Op::Log(a)))
    }

    /// `log(max(a, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        let fl = T::of_f64(floor);
        let out = self.map(a, |x| x.max(fl).ln());
        self.record(out, &[a], Op::LogFloor(a, floor))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, T::tanh);
        self.record(out, &[a], Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.record(out, &[a], Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(T::zero()));
        self.record(out, &[a], Op::Relu(a))
    }

    /// `log(sigmoid(a))` evaluated without overflow for large `|a|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, log_sigmoid);
        self.record(out, &[a], Op::LogSigmoid(a))
    }

    // ── normalisation over the last axis ────────────────────────────

    fn last_axis(&self, op: &'static str, a: Var) -> Result<usize, TensorError> {
        match self.shape(a).last() {
            Some(&n) if n > 0 => Ok(n),
            _ => Err(shape_err(op, format!("needs a non-empty last axis, got {:?}", self.shape(a)))),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.last_axis("softmax", a)?;
        let mut out = self.value(a).clone();
        out.data_mut().chunks_mut(n).for_each(softmax_in_place);
        Ok(self.record(out, &[a], Op::Softmax(a)))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.last_axis("log_softmax", a)?;
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|x| *x = *x - lse);
        }
        Ok(self.record(out, &[a], Op::LogSoftmax(a)))
    }

    // ── reductions ──────────────────────────────────────────────────

    /// Sum of all elements as a rank-0 tensor, accumulated in f64.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = T::of_f64(self.value(a).data().iter().map(|x| x.as_f64()).sum());
        self.record(Tensor::scalar(s), &[a], Op::Sum(a))
    }

    /// Mean of all elements as a rank-0 tensor, accumulated in f64.
    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(shape_err("mean", "empty input"));
        }
        let s: f64 = self.value(a).data().iter().map(|x| x.as_f64()).sum();
        Ok(self.record(Tensor::scalar(T::of_f64(s / n as f64)), &[a], Op::Mean(a)))
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.record(Tensor::new(out_shape, out)?, &[a], Op::SumAxis(a, axis)))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| shape_err("mean_axis", format!("axis {axis} out of range")))?;
        if len == 0 {
            return Err(shape_err("mean_axis", "empty axis"));
        }
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Euclidean norm of all elements as a rank-0 tensor.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().map(|&x| x * x).sum();
        self.record(Tensor::scalar(s.sqrt()), &[a], Op::L2Norm(a))
    }

    // ── shape manipulation ──────────────────────────────────────────

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.record(Tensor::new(shape, out)?, parts, Op::Concat(parts.to_vec(), axis)))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = axis_extents(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.record(Tensor::new(out_shape, out)?, &[a], Op::Slice { input: a, axis, start }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.record(out, &[a], Op::Reshape(a)))
    }

    // ── sequence operators ──────────────────────────────────────────

    /// Valid 1-D convolution over time.
    ///
    /// `input` is `[T, C]` or `[B, T, C]`, `weight` is `[window * C, O]` with
    /// rows ordered (offset, channel), `bias` is `[O]`. The output is
    /// `[B, T - window + 1, O]` (batch axis dropped for rank-2 input).
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, window: usize) -> Result<Var, TensorError> {
        let in_shape = self.shape(input).to_vec();
        let (b, t, c) = btc("conv1d", &in_shape)?;
        if window == 0 || t < window {
            return Err(shape_err("conv1d", format!("window {window} does not fit length {t}")));
        }
        let o = match *self.shape(weight) {
            [rows, o] if rows == window * c => o,
            ref s => return Err(shape_err("conv1d", format!("weight {s:?} does not match window {window} x channels {c}"))),
        };
        if self.shape(bias) != [o] {
            return Err(shape_err("conv1d", format!("bias {:?} does not match {o} channels", self.shape(bias))));
        }
        let l = t - window + 1;
        let cols = im2col(self.value(input).data(), b, t, c, window);
        let mut out = vec![T::zero(); b * l * o];
        T::gemm(b * l, window * c, o, &cols, false, self.value(weight).data(), false, &mut out, false);
        let bias_v = self.value(bias).data();
        for row in out.chunks_mut(o) {
            row.iter_mut().zip(bias_v).for_each(|(x, &y)| *x += y);
        }
        let shape = if in_shape.len() == 2 { vec![l, o] } else { vec![b, l, o] };
        Ok(self.record(
            Tensor::new(shape, out)?,
            &[input, weight, bias],
            Op::Conv1d { input, weight, bias, window },
        ))
    }

    /// Column-wise maximum over the time axis: `[T, C] -> [C]` or
    /// `[B, T, C] -> [B, C]`. Ties resolve to the earliest timestep.
    pub fn max_over_time(&mut self, a: Var) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let (b, t, c) = btc("max_over_time", &shape)?;
        if t == 0 {
            return Err(shape_err("max_over_time", "empty time axis"));
        }
        let src = self.value(a).data();
        let mut out = vec![T::zero(); b * c];
        let mut argmax = vec![0usize; b * c];
        for bi in 0..b {
            for ci in 0..c {
                let mut best = 0;
                let mut best_v = src[bi * t * c + ci];
                for ti in 1..t {
                    let v = src[(bi * t + ti) * c + ci];
                    if v > best_v {
                        best = ti;
                        best_v = v;
                    }
                }
                out[bi * c + ci] = best_v;
                argmax[bi * c + ci] = best;
            }
        }
        let out_shape = if shape.len() == 2 { vec![c] } else { vec![b, c] };
        Ok(self.record(Tensor::new(out_shape, out)?, &[a], Op::MaxOverTime { input: a, argmax }))
    }
}

pub(crate) fn im2col<T: Scalar>(x: &[T], b: usize, t: usize, c: usize, window: usize) -> Vec<T> {
    let l = t - window + 1;
    let width = window * c;
    let mut cols = Vec::with_capacity(b * l * width);
    for bi in 0..b {
        for ti in 0..l {
            let start = (bi * t + ti) * c;
            cols.extend_from_slice(&x[start..start + width]);
        }
    }
    cols
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sigmoid<T: Scalar>(x: T) -> T {
    // log σ(x) = min(x, 0) - log(1 + e^{-|x|})
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x = *x / total);
}
