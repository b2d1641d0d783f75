//! Dense f64 tensors and a define-by-run reverse-mode tape.
//!
//! A [`Tape`] records every operation executed through it. Values are stored
//! row-major with an explicit shape. Leaves either own their data or borrow it
//! from a longer-lived [`Tensor`] (model parameters, precomputed encoder
//! memory), so building a graph over a large parameter set costs no copies.
//!
//! Calling [`Tape::backward`] walks the tape in reverse. Gradients of leaves
//! accumulate across calls until [`Tape::zero_grad`] is called; gradients of
//! intermediate nodes are recomputed from scratch on every call.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: input {value} at index {index} is outside the domain")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense tensor with an optional gradient slot.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::Invalid(format!(
                "zero-sized dimension in {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros: valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar shape")
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Invalid("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[r * cols..(r + 1) * cols]
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

/// Unary and binary elementwise operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Tanh,
    Sigmoid,
    Exp,
    Log,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary(Elementwise, usize, usize),
    Unary(Elementwise, usize),
    Scale(usize, f64),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    Concat(Vec<usize>, usize),
    Reshape(usize),
    Transpose(usize),
    SumAxis(usize, usize),
    SumAll(usize),
    AddN(Vec<usize>),
    Slice {
        input: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
}

enum Value<'a> {
    Owned(Vec<f64>),
    Borrowed(&'a [f64]),
}

impl Value<'_> {
    fn as_slice(&self) -> &[f64] {
        match self {
            Value::Owned(v) => v,
            Value::Borrowed(s) => s,
        }
    }
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Nodes are appended in execution order, which is always a
/// valid topological order of the dataflow graph.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Split `shape` around `axis` into (outer, axis length, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize], i: usize| {
        let off = rank - s.len();
        if i < off {
            1
        } else {
            s[i - off]
        }
    };
    (0..rank)
        .map(|i| {
            let (x, y) = (pad(a, i), pad(b, i));
            match (x, y) {
                _ if x == y => Some(x),
                (1, _) => Some(y),
                (_, 1) => Some(x),
                _ => None,
            }
        })
        .collect()
}

/// For every flat index of `out`, the flat index into an input of shape
/// `inp` broadcast up to `out`. `None` when no broadcasting is needed.
fn broadcast_map(out: &[usize], inp: &[usize]) -> Option<Vec<usize>> {
    if out == inp {
        return None;
    }
    let rank = out.len();
    let off = rank - inp.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        let d = if i < off { 1 } else { inp[i - off] };
        strides[i] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        map.push(offset);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            offset -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Some(map)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(contribution).for_each(|(g, c)| *g += c),
        None => *slot = Some(contribution.to_vec()),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Value<'a>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.as_slice().len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// Record an owned leaf; it requires grad iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad;
        self.push(tensor.shape, Value::Owned(tensor.data), Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t))
    }

    /// Record a zero-copy leaf over `tensor`'s storage.
    pub fn borrow(&mut self, tensor: &'a Tensor) -> Var {
        self.borrow_as(tensor, tensor.requires_grad)
    }

    /// Like [`Tape::borrow`] with an explicit requires-grad flag.
    pub fn borrow_as(&mut self, tensor: &'a Tensor, requires_grad: bool) -> Var {
        self.push(
            tensor.shape.clone(),
            Value::Borrowed(&tensor.data),
            Op::Leaf,
            requires_grad,
        )
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Snapshot a node as a standalone tensor, carrying its accumulated
    /// gradient when it is a leaf that has one.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor {
            shape: node.shape.clone(),
            data: node.value.as_slice().to_vec(),
            requires_grad: node.requires_grad,
            grad: self.leaf_grads[v.0].clone(),
        }
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Stop-gradient copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let node = &self.nodes[v.0];
        let (shape, data) = (node.shape.clone(), node.value.as_slice().to_vec());
        self.push(shape, Value::Owned(data), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                row.iter_mut().zip(brow).for_each(|(o, b)| *o += x * b);
            }
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(vec![m, n], Value::Owned(out), Op::MatMul(a.0, b.0), rg))
    }

    /// Apply an elementwise operation. Binary operations broadcast any axis of
    /// size 1 (after left-padding the shorter shape with 1s).
    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (op.is_binary(), b) {
            (true, Some(b)) => self.binary(op, a, b),
            (false, None) => self.unary(op, a),
            (true, None) => Err(TensorError::Invalid(format!("{op:?} needs two operands"))),
            (false, Some(_)) => Err(TensorError::Invalid(format!("{op:?} takes one operand"))),
        }
    }

    fn binary(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let name = match op {
            Elementwise::Add => "add",
            Elementwise::Sub => "sub",
            _ => "mul",
        };
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| TensorError::Shape {
            op: name,
            left: sa.clone(),
            right: sb.clone(),
        })?;
        let f = |x: f64, y: f64| match op {
            Elementwise::Add => x + y,
            Elementwise::Sub => x - y,
            _ => x * y,
        };
        let (av, bv) = (self.value(a), self.value(b));
        let ma = broadcast_map(&out_shape, &sa);
        let mb = broadcast_map(&out_shape, &sb);
        let out: Vec<f64> = match (&ma, &mb) {
            (None, None) => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            (None, Some(mb)) => av.iter().zip(mb).map(|(&x, &j)| f(x, bv[j])).collect(),
            (Some(ma), None) => ma.iter().zip(bv).map(|(&i, &y)| f(av[i], y)).collect(),
            (Some(ma), Some(mb)) => ma.iter().zip(mb).map(|(&i, &j)| f(av[i], bv[j])).collect(),
        };
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out_shape, Value::Owned(out), Op::Binary(op, a.0, b.0), rg))
    }

    fn unary(&mut self, op: Elementwise, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out: Vec<f64> = match op {
            Elementwise::Tanh => av.iter().map(|x| x.tanh()).collect(),
            Elementwise::Sigmoid => av.iter().map(|&x| sigmoid(x)).collect(),
            Elementwise::Exp => av.iter().map(|x| x.exp()).collect(),
            Elementwise::Log => {
                if let Some((index, &value)) =
                    av.iter().enumerate().find(|(_, &x)| x <= 0.0 || x.is_nan())
                {
                    return Err(TensorError::Domain {
                        op: "log",
                        index,
                        value,
                    });
                }
                av.iter().map(|x| x.ln()).collect()
            }
            _ => unreachable!("binary op routed to unary"),
        };
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a.0);
        Ok(self.push(shape, Value::Owned(out), Op::Unary(op, a.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Tanh, a).expect("tanh is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Exp, a).expect("exp is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Log, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a.0);
        self.push(shape, Value::Owned(out), Op::Scale(a.0, factor), rg)
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(TensorError::Axis {
                op,
                axis,
                shape: self.shape(a).to_vec(),
            });
        }
        Ok(())
    }

    fn softmax_like(&mut self, a: Var, axis: usize, log: bool) -> Result<Var> {
        self.check_axis(if log { "log_softmax" } else { "softmax" }, a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        let av = self.value(a);
        let mut out = vec![0.0; av.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let (arg, max) = (0..n).fold((0, f64::NEG_INFINITY), |(ak, m), k| {
                    if av[at(k)] > m {
                        (k, av[at(k)])
                    } else {
                        (ak, m)
                    }
                });
                // the max term contributes exactly 1; ln_1p keeps tiny tails
                let rest: f64 = (0..n)
                    .filter(|&k| k != arg)
                    .map(|k| (av[at(k)] - max).exp())
                    .sum();
                let sum = 1.0 + rest;
                if log {
                    let lse = rest.ln_1p();
                    (0..n).for_each(|k| out[at(k)] = av[at(k)] - max - lse);
                } else {
                    (0..n).for_each(|k| out[at(k)] = (av[at(k)] - max).exp() / sum);
                }
            }
        }
        let op = if log {
            Op::LogSoftmax(a.0, axis)
        } else {
            Op::Softmax(a.0, axis)
        };
        let rg = self.rg(a.0);
        Ok(self.push(shape, Value::Owned(out), op, rg))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_like(a, axis, false)
    }

    /// `x - max - log(sum(exp(x - max)))` along `axis`.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_like(a, axis, true)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut axis_len = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            axis_len += s[axis];
        }
        let mut shape = base;
        shape[axis] = axis_len;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(shape, Value::Owned(out), Op::Concat(ids, axis), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() || shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape,
            });
        }
        let data = self.value(a).to_vec();
        let rg = self.rg(a.0);
        Ok(self.push(shape, Value::Owned(data), Op::Reshape(a.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::Invalid(format!("transpose of rank-{} tensor", s.len())));
        }
        let (r, c) = (s[0], s[1]);
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(vec![c, r], Value::Owned(out), Op::Transpose(a.0), rg))
    }

    /// Sum along `axis`; the axis is removed (a rank-1 input yields shape `[1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        let av = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &av[(o * n + k) * inner..(o * n + k + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(a.0);
        Ok(self.push(out_shape, Value::Owned(out), Op::SumAxis(a.0, axis), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a.0);
        self.push(vec![1], Value::Owned(vec![s]), Op::SumAll(a.0), rg)
    }

    /// Sum of equally shaped tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("add_n of zero tensors".into()))?;
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.value(first).len()];
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(TensorError::Shape {
                    op: "add_n",
                    left: shape,
                    right: self.shape(p).to_vec(),
                });
            }
            out.iter_mut().zip(self.value(p)).for_each(|(o, v)| *o += v);
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(shape, Value::Owned(out), Op::AddN(ids), rg))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", a, axis)?;
        let shape = self.shape(a).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::Invalid(format!(
                "slice [{start}, {}) out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let av = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&av[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a.0);
        let op = Op::Slice {
            input: a.0,
            axis,
            start,
            len,
        };
        Ok(self.push(out_shape, Value::Owned(out), op, rg))
    }

    /// Element `index` of a flat view of `a`, as a `[1]` tensor.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, vec![n])?;
        self.slice(flat, 0, index, 1)
    }

    /// Backpropagate from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                accumulate(&mut self.leaf_grads[id], &g);
                continue;
            }
            self.backward_node(id, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.as_slice();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.nodes[a].value.as_slice(), self.nodes[b].value.as_slice());
                if self.rg(a) {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    accumulate(&mut grads[a], &da);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            db[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(d, gv)| *d += x * gv);
                        }
                    }
                    accumulate(&mut grads[b], &db);
                }
            }
            &Op::Binary(op, a, b) => {
                let (av, bv) = (self.nodes[a].value.as_slice(), self.nodes[b].value.as_slice());
                let ma = broadcast_map(&node.shape, &self.nodes[a].shape);
                let mb = broadcast_map(&node.shape, &self.nodes[b].shape);
                let ia = |i: usize| ma.as_ref().map_or(i, |m| m[i]);
                let ib = |i: usize| mb.as_ref().map_or(i, |m| m[i]);
                if self.rg(a) {
                    let mut da = vec![0.0; av.len()];
                    for (i, gv) in g.iter().enumerate() {
                        da[ia(i)] += match op {
                            Elementwise::Mul => gv * bv[ib(i)],
                            _ => *gv,
                        };
                    }
                    accumulate(&mut grads[a], &da);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; bv.len()];
                    for (i, gv) in g.iter().enumerate() {
                        db[ib(i)] += match op {
                            Elementwise::Mul => gv * av[ia(i)],
                            Elementwise::Sub => -gv,
                            _ => *gv,
                        };
                    }
                    accumulate(&mut grads[b], &db);
                }
            }
            &Op::Unary(op, a) => {
                let av = self.nodes[a].value.as_slice();
                let da: Vec<f64> = match op {
                    Elementwise::Tanh => g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Elementwise::Sigmoid => {
                        g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect()
                    }
                    Elementwise::Exp => g.iter().zip(out).map(|(g, y)| g * y).collect(),
                    Elementwise::Log => g.iter().zip(av).map(|(g, x)| g / x).collect(),
                    _ => unreachable!(),
                };
                accumulate(&mut grads[a], &da);
            }
            &Op::Scale(a, f) => {
                let da: Vec<f64> = g.iter().map(|g| g * f).collect();
                accumulate(&mut grads[a], &da);
            }
            &Op::Softmax(a, axis) | &Op::LogSoftmax(a, axis) => {
                let log = matches!(node.op, Op::LogSoftmax(..));
                let (outer, n, inner) = axis_split(&node.shape, axis);
                let mut da = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        if log {
                            let gs: f64 = (0..n).map(|k| g[at(k)]).sum();
                            for k in 0..n {
                                da[at(k)] = g[at(k)] - out[at(k)].exp() * gs;
                            }
                        } else {
                            let dot: f64 = (0..n).map(|k| g[at(k)] * out[at(k)]).sum();
                            for k in 0..n {
                                da[at(k)] = out[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
                accumulate(&mut grads[a], &da);
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = axis_split(&node.shape, *axis);
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.nodes[p].shape[*axis] * inner;
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * total + offset;
                            dp.extend_from_slice(&g[base..base + chunk]);
                        }
                        accumulate(&mut grads[p], &dp);
                    }
                    offset += chunk;
                }
            }
            &Op::Reshape(a) => accumulate(&mut grads[a], g),
            &Op::Transpose(a) => {
                let (r, c) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                accumulate(&mut grads[a], &da);
            }
            &Op::SumAxis(a, axis) => {
                let (outer, n, inner) = axis_split(&self.nodes[a].shape, axis);
                let mut da = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        da.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(&mut grads[a], &da);
            }
            &Op::SumAll(a) => {
                let da = vec![g[0]; self.nodes[a].value.as_slice().len()];
                accumulate(&mut grads[a], &da);
            }
            Op::AddN(parts) => {
                for &p in parts {
                    if self.rg(p) {
                        accumulate(&mut grads[p], g);
                    }
                }
            }
            &Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                let (outer, n, inner) = axis_split(&self.nodes[input].shape, axis);
                let mut da = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    da[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                accumulate(&mut grads[input], &da);
            }
        }
    }
}
