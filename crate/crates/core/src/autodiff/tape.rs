//! Dynamic reverse-mode tape.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! nodes in reverse insertion order, which is a valid topological order
//! because a node can only reference nodes created before it.

use std::collections::HashMap;
use std::str::FromStr;

use super::params::{ParamId, ParamStore};
use super::tensor::{numel, Tensor};
use super::TensorError;

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind {
    Relu,
    Gelu,
    Sigmoid,
    Log,
    Exp,
    Abs,
    Pow(f64),
    Clamp(f64, f64),
    Affine(f64, f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var },
    Unary { kind: UnaryKind, x: Var },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Softmax { x: Var },
    LayerNorm { x: Var, eps: f64 },
    Reshape { x: Var },
    Permute { x: Var, src: Vec<usize> },
    Concat { parts: Vec<Var> },
    Slice { x: Var, offset: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Sum { x: Var },
    Mean { x: Var },
    SumDim { x: Var, outer: usize, len: usize, inner: usize },
    MaxDim { x: Var, argmax: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Primitive kinds reachable through [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Relu,
    Gelu,
    SoftmaxLastDim,
    LayerNormLastDim,
    Reshape,
    ConcatFirstDim,
    SliceFirstDim,
    Conv2d,
    Sigmoid,
    Sum,
    Mean,
    TransposeLast2,
}

impl FromStr for OpKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => OpKind::MatMul,
            "add" => OpKind::Add,
            "mul" => OpKind::Mul,
            "relu" => OpKind::Relu,
            "gelu" => OpKind::Gelu,
            "softmax_lastdim" => OpKind::SoftmaxLastDim,
            "layernorm_lastdim" => OpKind::LayerNormLastDim,
            "reshape" => OpKind::Reshape,
            "concat_firstdim" => OpKind::ConcatFirstDim,
            "slice_firstdim" => OpKind::SliceFirstDim,
            "conv2d" => OpKind::Conv2d,
            "sigmoid" => OpKind::Sigmoid,
            "sum" => OpKind::Sum,
            "mean" => OpKind::Mean,
            "transpose_last2" => OpKind::TransposeLast2,
            other => return Err(TensorError::UnknownOp(other.to_string())),
        })
    }
}

/// Attributes for [`Tape::apply`]; each kind reads only the fields it needs.
#[derive(Clone, Debug, Default)]
pub struct OpAttrs {
    pub shape: Option<Vec<usize>>,
    pub range: Option<(usize, usize)>,
    pub stride: Option<usize>,
    pub padding: Option<usize>,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
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

fn add_into(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    /// Frozen parameters enter the graph as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, !p.frozen);
        self.nodes[v.0].param = Some(id);
        self.param_leaves.insert(id, v);
        v
    }

    // ---- generic dispatch -------------------------------------------------

    /// Applies a primitive by kind. Arity and attributes are validated here;
    /// shape validation happens in the concrete op.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var], attrs: &OpAttrs) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(TensorError::Invalid(format!("{kind:?} takes {n} input(s), got {}", inputs.len())))
            }
        };
        match kind {
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Relu => {
                arity(1)?;
                Ok(self.relu(inputs[0]))
            }
            OpKind::Gelu => {
                arity(1)?;
                Ok(self.gelu(inputs[0]))
            }
            OpKind::Sigmoid => {
                arity(1)?;
                Ok(self.sigmoid(inputs[0]))
            }
            OpKind::SoftmaxLastDim => {
                arity(1)?;
                Ok(self.softmax_lastdim(inputs[0]))
            }
            OpKind::LayerNormLastDim => {
                arity(1)?;
                Ok(self.layernorm_lastdim(inputs[0]))
            }
            OpKind::Reshape => {
                arity(1)?;
                let shape = attrs
                    .shape
                    .clone()
                    .ok_or_else(|| TensorError::Invalid("reshape requires a target shape".into()))?;
                self.reshape(inputs[0], &shape)
            }
            OpKind::ConcatFirstDim => self.concat_firstdim(inputs),
            OpKind::SliceFirstDim => {
                arity(1)?;
                let (start, end) =
                    attrs.range.ok_or_else(|| TensorError::Invalid("slice_firstdim requires a range".into()))?;
                self.slice_firstdim(inputs[0], start, end)
            }
            OpKind::Conv2d => {
                if inputs.len() != 2 && inputs.len() != 3 {
                    return Err(TensorError::Invalid(format!("Conv2d takes 2 or 3 inputs, got {}", inputs.len())));
                }
                self.conv2d(
                    inputs[0],
                    inputs[1],
                    inputs.get(2).copied(),
                    attrs.stride.unwrap_or(1),
                    attrs.padding.unwrap_or(0),
                )
            }
            OpKind::Sum => {
                arity(1)?;
                Ok(self.sum(inputs[0]))
            }
            OpKind::Mean => {
                arity(1)?;
                Ok(self.mean(inputs[0]))
            }
            OpKind::TransposeLast2 => {
                arity(1)?;
                self.transpose_last2(inputs[0])
            }
        }
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let nb = numel(sb);
        let ok = sa == sb || nb == 1 || (sb.len() <= sa.len() && &sa[sa.len() - sb.len()..] == sb);
        if !ok {
            return Err(shape_err(name, format!("right operand {sb:?} does not broadcast onto {sa:?}")));
        }
        let av = self.value(a);
        let bv = self.value(b).data();
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
            BinaryKind::Max => |x, y| if x >= y { x } else { y },
            BinaryKind::Min => |x, y| if x <= y { x } else { y },
        };
        let data: Vec<f64> = av.data().iter().enumerate().map(|(i, &x)| f(x, bv[i % nb])).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b, "div")
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Max, a, b, "maximum")
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Min, a, b, "minimum")
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let f = |v: f64| match kind {
            UnaryKind::Relu => v.max(0.0),
            UnaryKind::Gelu => gelu(v),
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Log => v.ln(),
            UnaryKind::Exp => v.exp(),
            UnaryKind::Abs => v.abs(),
            UnaryKind::Pow(p) => v.powf(p),
            UnaryKind::Clamp(lo, hi) => v.clamp(lo, hi),
            UnaryKind::Affine(s, c) => s * v + c,
        };
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, Op::Unary { kind, x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(UnaryKind::Pow(p), x)
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(UnaryKind::Clamp(lo, hi), x)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(UnaryKind::Affine(scale, shift), x)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    // ---- linear algebra ---------------------------------------------------

    /// `(m,k)·(k,n)` or batched `(b,m,k)·(b,k,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, k2, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) => (1, *m, *k, *k2, *n),
            ([ba, m, k], [bb, k2, n]) if ba == bb => (*ba, *m, *k, *k2, *n),
            _ => return Err(shape_err("matmul", format!("unsupported operand shapes {sa:?} x {sb:?}"))),
        };
        if k != k2 {
            return Err(shape_err("matmul", format!("inner extents differ: {sa:?} x {sb:?} ({k} != {k2})")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ao = &av[bi * m * k..(bi + 1) * m * k];
            let bo = &bv[bi * k * n..(bi + 1) * k * n];
            let oo = &mut out[bi * m * n..(bi + 1) * m * n];
            matmul_kernel(ao, bo, oo, m, k, n);
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, batch, m, k, n }, rg))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap_or(&1);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(value, Op::Softmax { x }, rg)
    }

    /// Normalization over the last axis without affine parameters.
    pub fn layernorm_lastdim(&mut self, x: Var) -> Var {
        let eps = LAYER_NORM_EPS;
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap_or(&1);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let (mean, rstd) = row_stats(row, eps);
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(value, Op::LayerNorm { x, eps }, rg)
    }

    // ---- shape ops --------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if numel(shape) != xv.numel() || shape.contains(&0) {
            return Err(shape_err("reshape", format!("cannot view {:?} as {shape:?}", xv.shape())));
        }
        let value = Tensor::from_parts(shape.to_vec(), xv.data().to_vec());
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{perm:?} is not a permutation of the {r} axes of {shape:?}")));
        }
        let mut in_strides = vec![1usize; r];
        for i in (0..r.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let total = numel(&shape);
        let mut src = Vec::with_capacity(total);
        let mut idx = vec![0usize; r];
        let mut off = 0usize;
        for _ in 0..total {
            src.push(off);
            for ax in (0..r).rev() {
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        let xd = self.value(x).data();
        let data: Vec<f64> = src.iter().map(|&s| xd[s]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute { x, src }, rg))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(shape_err("transpose_last2", format!("needs rank >= 2, got {:?}", self.shape(x))));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat_firstdim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("concat_firstdim", "no inputs".into()))?;
        let tail = self.shape(first).get(1..).map(<[usize]>::to_vec).unwrap_or_default();
        if self.shape(first).is_empty() {
            return Err(shape_err("concat_firstdim", "scalars cannot be concatenated".into()));
        }
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err(
                    "concat_firstdim",
                    format!("trailing extents {:?} differ from {tail:?}", s.get(1..).unwrap_or(&[])),
                ));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat { parts: parts.to_vec() }, rg))
    }

    /// Rows `start..end` along the first axis.
    pub fn slice_firstdim(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start >= end || end > shape[0] {
            return Err(shape_err("slice_firstdim", format!("range {start}..{end} invalid for shape {shape:?}")));
        }
        let inner = numel(&shape[1..]);
        let data = self.value(x).data()[start * inner..end * inner].to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = end - start;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Slice { x, offset: start * inner }, rg))
    }

    /// Selects rows of `table` (first axis) by index, e.g. embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.is_empty() || ids.is_empty() {
            return Err(shape_err("gather_rows", format!("table {shape:?} with {} ids", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= shape[0]) {
            return Err(shape_err("gather_rows", format!("row {bad} out of range for table {shape:?}")));
        }
        let inner = numel(&shape[1..]);
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * inner);
        for &i in ids {
            data.extend_from_slice(&td[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = vec![ids.len()];
        out_shape.extend_from_slice(&shape[1..]);
        let rg = self.rg(table);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::GatherRows { table, ids: ids.to_vec() }, rg))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    fn reduce_dims(&self, x: Var, dim: usize, op: &'static str) -> Result<(Vec<usize>, usize, usize, usize)> {
        let shape = self.shape(x);
        if dim >= shape.len() {
            return Err(shape_err(op, format!("axis {dim} out of range for {shape:?}")));
        }
        let outer = numel(&shape[..dim]);
        let inner = numel(&shape[dim + 1..]);
        let mut out_shape = shape.to_vec();
        out_shape.remove(dim);
        Ok((out_shape, outer, shape[dim], inner))
    }

    pub fn sum_dim(&mut self, x: Var, dim: usize) -> Result<Var> {
        let (out_shape, outer, len, inner) = self.reduce_dims(x, dim, "sum_dim")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xd[(o * len + l) * inner + i];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::SumDim { x, outer, len, inner }, rg))
    }

    /// Maximum along `dim`; the gradient flows to the first maximal entry.
    pub fn max_dim(&mut self, x: Var, dim: usize) -> Result<Var> {
        let (out_shape, outer, len, inner) = self.reduce_dims(x, dim, "max_dim")?;
        let xd = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let src = (o * len + l) * inner + i;
                    let dst = o * inner + i;
                    if l == 0 || xd[src] > out[dst] {
                        out[dst] = xd[src];
                        argmax[dst] = src;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::MaxDim { x, argmax }, rg))
    }

    // ---- convolution ------------------------------------------------------

    /// 2-D convolution over NCHW input with OIHW weights and optional per-output bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&[batch, cin, h, wid], &[cout, cin2, kh, kw]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(shape_err("conv2d", format!("expected NCHW input and OIHW weight, got {xs:?} and {ws:?}")));
        };
        if cin != cin2 {
            return Err(shape_err("conv2d", format!("input has {cin} channels but weight expects {cin2}")));
        }
        if stride == 0 || kh > h + 2 * pad || kw > wid + 2 * pad {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit {h}x{wid} with padding {pad} stride {stride}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv2d", format!("bias shape {:?} != [{cout}]", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w: wid,
            cout,
            kh,
            kw,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wid + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        };
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = b.map(|b| self.value(b).data());
        let ckk = cin * kh * kw;
        let ohw = geom.oh * geom.ow;
        let mut out = vec![0.0; batch * cout * ohw];
        let mut cols = vec![0.0; ckk * ohw];
        for n in 0..batch {
            im2col(&xd[n * cin * h * wid..(n + 1) * cin * h * wid], &geom, &mut cols);
            let o = &mut out[n * cout * ohw..(n + 1) * cout * ohw];
            matmul_kernel(wd, &cols, o, cout, ckk, ohw);
            if let Some(bd) = bd {
                for (c, row) in o.chunks_mut(ohw).enumerate() {
                    for v in row {
                        *v += bd[c];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_parts(vec![batch, cout, geom.oh, geom.ow], out), Op::Conv2d { x, w, b, geom }, rg))
    }

    // ---- backward ---------------------------------------------------------

    /// Populates gradients of `root` with respect to every node that requires one.
    /// Gradients of a node used several times are summed.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rs = self.shape(root);
        if numel(rs) != 1 {
            return Err(TensorError::NonScalarRoot(rs.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.rg(root) {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0)?.as_ref().map(|g| Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    /// Gradients of parameter leaves after `backward`.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.param_leaves.iter().filter_map(|(&id, &v)| self.grads.get(v.0).and_then(|g| g.as_deref()).map(|g| (id, g)))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let nb = bv.len();
                if self.rg(*a) {
                    let da = add_into(&mut grads[a.0], av.len());
                    for (j, gj) in g.iter().enumerate() {
                        let (x, y) = (av[j], bv[j % nb]);
                        da[j] += gj
                            * match kind {
                                BinaryKind::Add | BinaryKind::Sub => 1.0,
                                BinaryKind::Mul => y,
                                BinaryKind::Div => 1.0 / y,
                                BinaryKind::Max => f64::from(u8::from(x >= y)),
                                BinaryKind::Min => f64::from(u8::from(x <= y)),
                            };
                    }
                }
                if self.rg(*b) {
                    let db = add_into(&mut grads[b.0], nb);
                    for (j, gj) in g.iter().enumerate() {
                        let (x, y) = (av[j], bv[j % nb]);
                        db[j % nb] += gj
                            * match kind {
                                BinaryKind::Add => 1.0,
                                BinaryKind::Sub => -1.0,
                                BinaryKind::Mul => x,
                                BinaryKind::Div => -x / (y * y),
                                BinaryKind::Max => f64::from(u8::from(x < y)),
                                BinaryKind::Min => f64::from(u8::from(x > y)),
                            };
                    }
                }
            }
            Op::Unary { kind, x } => {
                if !self.rg(*x) {
                    return;
                }
                let xv = self.value(*x).data();
                let dx = add_into(&mut grads[x.0], xv.len());
                for j in 0..g.len() {
                    let (v, y) = (xv[j], out[j]);
                    dx[j] += g[j]
                        * match *kind {
                            UnaryKind::Relu => f64::from(u8::from(v > 0.0)),
                            UnaryKind::Gelu => gelu_grad(v),
                            UnaryKind::Sigmoid => y * (1.0 - y),
                            UnaryKind::Log => 1.0 / v,
                            UnaryKind::Exp => y,
                            UnaryKind::Abs => {
                                if v > 0.0 {
                                    1.0
                                } else if v < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Pow(p) => p * v.powf(p - 1.0),
                            UnaryKind::Clamp(lo, hi) => f64::from(u8::from(v >= lo && v <= hi)),
                            UnaryKind::Affine(s, _) => s,
                        };
                }
            }
            Op::MatMul { a, b, batch, m, k, n } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    let da = add_into(&mut grads[a.0], av.len());
                    for bi in 0..batch {
                        let go = &g[bi * m * n..(bi + 1) * m * n];
                        let bo = &bv[bi * k * n..(bi + 1) * k * n];
                        let dao = &mut da[bi * m * k..(bi + 1) * m * k];
                        for i in 0..m {
                            let grow = &go[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bo[p * n..(p + 1) * n];
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += grow[j] * brow[j];
                                }
                                dao[i * k + p] += s;
                            }
                        }
                    }
                }
                if self.rg(*b) {
                    let db = add_into(&mut grads[b.0], bv.len());
                    for bi in 0..batch {
                        let go = &g[bi * m * n..(bi + 1) * m * n];
                        let ao = &av[bi * m * k..(bi + 1) * m * k];
                        let dbo = &mut db[bi * k * n..(bi + 1) * k * n];
                        for i in 0..m {
                            let grow = &go[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = ao[i * k + p];
                                let drow = &mut dbo[p * n..(p + 1) * n];
                                for j in 0..n {
                                    drow[j] += aip * grow[j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                if !self.rg(*x) {
                    return;
                }
                let d = *node.value.shape().last().unwrap_or(&1);
                let dx = add_into(&mut grads[x.0], out.len());
                for ((yr, gr), dr) in out.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..d {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, eps } => {
                if !self.rg(*x) {
                    return;
                }
                let xv = self.value(*x).data();
                let d = *node.value.shape().last().unwrap_or(&1);
                let dx = add_into(&mut grads[x.0], xv.len());
                for r in 0..xv.len() / d {
                    let xr = &xv[r * d..(r + 1) * d];
                    let (_, rstd) = row_stats(xr, *eps);
                    let yr = &out[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let gm = gr.iter().sum::<f64>() / d as f64;
                    let gym = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] += rstd * (gr[j] - gm - yr[j] * gym);
                    }
                }
            }
            Op::Reshape { x } => {
                if self.rg(*x) {
                    let dx = add_into(&mut grads[x.0], g.len());
                    for (d, gj) in dx.iter_mut().zip(g) {
                        *d += gj;
                    }
                }
            }
            Op::Permute { x, src } => {
                if self.rg(*x) {
                    let dx = add_into(&mut grads[x.0], g.len());
                    for (gj, &s) in g.iter().zip(src) {
                        dx[s] += gj;
                    }
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if self.rg(*p) {
                        let dp = add_into(&mut grads[p.0], len);
                        for (d, gj) in dp.iter_mut().zip(&g[off..off + len]) {
                            *d += gj;
                        }
                    }
                    off += len;
                }
            }
            Op::Slice { x, offset } => {
                if self.rg(*x) {
                    let dx = add_into(&mut grads[x.0], self.value(*x).numel());
                    for (d, gj) in dx[*offset..*offset + g.len()].iter_mut().zip(g) {
                        *d += gj;
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if self.rg(*table) {
                    let inner = g.len() / ids.len();
                    let dt = add_into(&mut grads[table.0], self.value(*table).numel());
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..inner {
                            dt[id * inner + j] += g[r * inner + j];
                        }
                    }
                }
            }
            Op::Sum { x } | Op::Mean { x } => {
                if self.rg(*x) {
                    let len = self.value(*x).numel();
                    let scale = if matches!(node.op, Op::Mean { .. }) { 1.0 / len as f64 } else { 1.0 };
                    let dx = add_into(&mut grads[x.0], len);
                    for d in dx.iter_mut() {
                        *d += g[0] * scale;
                    }
                }
            }
            Op::SumDim { x, outer, len, inner } => {
                if self.rg(*x) {
                    let dx = add_into(&mut grads[x.0], outer * len * inner);
                    for o in 0..*outer {
                        for l in 0..*len {
                            for i in 0..*inner {
                                dx[(o * len + l) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::MaxDim { x, argmax } => {
                if self.rg(*x) {
                    let dx = add_into(&mut grads[x.0], self.value(*x).numel());
                    for (gj, &s) in g.iter().zip(argmax) {
                        dx[s] += gj;
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let geom = *geom;
                let ConvGeom { batch, cin, h, w: wid, cout, kh, kw, oh, ow, .. } = geom;
                let ckk = cin * kh * kw;
                let ohw = oh * ow;
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let mut cols = vec![0.0; ckk * ohw];
                let mut dcols = vec![0.0; ckk * ohw];
                let need_w = self.rg(*w);
                let need_x = self.rg(*x);
                if let Some(b) = b {
                    if self.rg(*b) {
                        let db = add_into(&mut grads[b.0], cout);
                        for n in 0..batch {
                            for c in 0..cout {
                                let base = (n * cout + c) * ohw;
                                db[c] += g[base..base + ohw].iter().sum::<f64>();
                            }
                        }
                    }
                }
                for n in 0..batch {
                    let gn = &g[n * cout * ohw..(n + 1) * cout * ohw];
                    if need_w {
                        im2col(&xd[n * cin * h * wid..(n + 1) * cin * h * wid], &geom, &mut cols);
                        let dw = add_into(&mut grads[w.0], cout * ckk);
                        // dW += g_n · cols^T
                        for o in 0..cout {
                            let grow = &gn[o * ohw..(o + 1) * ohw];
                            for p in 0..ckk {
                                let crow = &cols[p * ohw..(p + 1) * ohw];
                                let mut s = 0.0;
                                for j in 0..ohw {
                                    s += grow[j] * crow[j];
                                }
                                dw[o * ckk + p] += s;
                            }
                        }
                    }
                    if need_x {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        // dcols = W^T · g_n
                        for o in 0..cout {
                            let grow = &gn[o * ohw..(o + 1) * ohw];
                            for p in 0..ckk {
                                let wv = wd[o * ckk + p];
                                let drow = &mut dcols[p * ohw..(p + 1) * ohw];
                                for j in 0..ohw {
                                    drow[j] += wv * grow[j];
                                }
                            }
                        }
                        let dx = add_into(&mut grads[x.0], batch * cin * h * wid);
                        col2im(&dcols, &geom, &mut dx[n * cin * h * wid..(n + 1) * cin * h * wid]);
                    }
                }
            }
        }
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// `out (m,n) = a (m,k) · b (k,n)`, overwriting `out`.
fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ohw = g.oh * g.ow;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * g.ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ohw = g.oh * g.ow;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}
