use std::cell::{Cell, RefCell};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use super::kernels::{self, gemm, MatRef};
use super::{check_shape, Result, Tensor, TensorError};

/// Recorded operation together with whatever the backward rule needs.
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    AddScalar {
        x: usize,
    },
    ScaleBy {
        x: usize,
        s: usize,
    },
    Tanh {
        x: usize,
    },
    Silu {
        x: usize,
    },
    Softmax {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mean {
        x: usize,
        axis: usize,
    },
    Sum {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Expand {
        x: usize,
        axis: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Mse {
        a: usize,
        b: usize,
    },
    Rotary {
        x: usize,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
}

/// Discriminant of every recorded operation, used for reporting and for
/// the backward fault hook exercised by the gradient checker's own tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    AddBias,
    Scale,
    AddScalar,
    ScaleBy,
    Tanh,
    Silu,
    Softmax,
    LayerNorm,
    Mean,
    Sum,
    Reshape,
    Permute,
    Concat,
    Narrow,
    Expand,
    Embedding,
    Mse,
    Rotary,
}

impl OpKind {
    /// Every differentiable operation.
    pub const DIFFERENTIABLE: [OpKind; 22] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddBias,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::ScaleBy,
        OpKind::Tanh,
        OpKind::Silu,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Expand,
        OpKind::Embedding,
        OpKind::Mse,
        OpKind::Rotary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddBias => "add_bias",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::ScaleBy => "scale_by",
            OpKind::Tanh => "tanh",
            OpKind::Silu => "silu",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Expand => "expand",
            OpKind::Embedding => "embedding",
            OpKind::Mse => "mse",
            OpKind::Rotary => "rotary",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        OpKind::DIFFERENTIABLE
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown op `{s}`"))
    }
}

impl Op {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddScalar { .. } => OpKind::AddScalar,
            Op::ScaleBy { .. } => OpKind::ScaleBy,
            Op::Tanh { .. } => OpKind::Tanh,
            Op::Silu { .. } => OpKind::Silu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Mean { .. } => OpKind::Mean,
            Op::Sum { .. } => OpKind::Sum,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Expand { .. } => OpKind::Expand,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::Mse { .. } => OpKind::Mse,
            Op::Rotary { .. } => OpKind::Rotary,
        }
    }
}

pub(crate) struct Node {
    pub value: Arc<Tensor>,
    pub op: Op,
    pub requires_grad: bool,
}

/// A single differentiation tape.
///
/// A graph is single-threaded; build one per forward pass. Parameters enter
/// through [`Graph::param`] without copying their storage.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: RefCell<Vec<Node>>,
    pub(crate) fault: Cell<Option<OpKind>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(Arc::new(value), false)
    }

    /// Leaf that receives a gradient.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.leaf(Arc::new(value), true)
    }

    /// Leaf sharing a parameter's storage; receives a gradient.
    pub fn param(&self, value: &Arc<Tensor>) -> Var<'_> {
        self.leaf(Arc::clone(value), true)
    }

    fn leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Scales every gradient contribution of `kind` by 1.25 during backward.
    ///
    /// Exists so the gradient checker can prove it detects a broken rule.
    #[doc(hidden)]
    pub fn inject_fault(&self, kind: OpKind) {
        self.fault.set(Some(kind));
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn owns(&self, v: Var<'_>) -> Result<usize> {
        if std::ptr::eq(self, v.graph) {
            Ok(v.id)
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat<'g>(&'g self, vars: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        if vars.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "no inputs".into(),
            });
        }
        let ids = vars
            .iter()
            .map(|v| self.owns(*v))
            .collect::<Result<Vec<_>>>()?;
        let values: Vec<Arc<Tensor>> = ids.iter().map(|&i| self.value_of(i)).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                ndim: base.len(),
            });
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = ids.iter().any(|&i| self.requires(i));
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Concat { inputs: ids, axis },
            rg,
        ))
    }

    /// Row gather from a `[vocab, dim]` table.
    pub fn embedding<'g>(&'g self, table: Var<'g>, ids: &[usize]) -> Result<Var<'g>> {
        let tid = self.owns(table)?;
        let t = self.value_of(tid);
        if t.ndim() != 2 {
            return Err(TensorError::InvalidShape {
                op: "embedding",
                shape: t.shape().to_vec(),
                reason: "table must be [vocab, dim]".into(),
            });
        }
        if ids.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "embedding",
                shape: vec![0],
                reason: "no ids".into(),
            });
        }
        let (vocab, dim) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    extent: vocab,
                });
            }
            data.extend_from_slice(&t.data()[id * dim..(id + 1) * dim]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), dim], data),
            Op::Embedding {
                table: tid,
                ids: ids.to_vec(),
            },
            self.requires(tid),
        ))
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

// fallible, so these stay methods rather than operator impls
#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.graph.requires(self.id);
        self.graph.push(value, op, rg)
    }

    fn binary(self, other: Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.graph.requires(self.id) || self.graph.requires(other.id);
        self.graph.push(value, op, rg)
    }

    fn zip_same(
        self,
        other: Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, usize)> {
        let oid = self.graph.owns(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(mismatch(name, &a, &b));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok((Tensor::from_parts(a.shape().to_vec(), data), oid))
    }

    fn map(self, f: impl Fn(f64) -> f64) -> Tensor {
        let a = self.value();
        Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|v| f(*v)).collect())
    }

    /// Batched matrix product `self @ rhs`.
    ///
    /// `self` is `[..., m, k]`; `rhs` is either a shared `[k, n]` matrix or
    /// carries the same leading batch extents as `self`.
    pub fn matmul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.matmul_impl(rhs, false)
    }

    /// Batched `self @ rhsᵀ` (transpose of the last two axes of `rhs`).
    pub fn matmul_t(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.matmul_impl(rhs, true)
    }

    fn matmul_impl(self, rhs: Var<'g>, trans_b: bool) -> Result<Var<'g>> {
        let bid = self.graph.owns(rhs)?;
        let (a, b) = (self.value(), rhs.value());
        let out = matmul_forward(&a, &b, trans_b)?;
        Ok(self.binary(
            rhs,
            out,
            Op::MatMul {
                a: self.id,
                b: bid,
                trans_b,
            },
        ))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let (v, b) = self.zip_same(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, v, Op::Add { a: self.id, b }))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        let (v, b) = self.zip_same(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, v, Op::Sub { a: self.id, b }))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (v, b) = self.zip_same(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, v, Op::Mul { a: self.id, b }))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(self, bias: Var<'g>) -> Result<Var<'g>> {
        let bid = self.graph.owns(bias)?;
        let (x, b) = (self.value(), bias.value());
        let n = *x.shape().last().expect("rank >= 1");
        if b.ndim() != 1 || b.numel() != n {
            return Err(mismatch("add_bias", &x, &b));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        Ok(self.binary(
            bias,
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::AddBias {
                x: self.id,
                bias: bid,
            },
        ))
    }

    pub fn scale(self, factor: f64) -> Var<'g> {
        let v = self.map(|x| x * factor);
        self.unary(v, Op::Scale { x: self.id, factor })
    }

    pub fn add_scalar(self, value: f64) -> Var<'g> {
        let v = self.map(|x| x + value);
        self.unary(v, Op::AddScalar { x: self.id })
    }

    /// Multiplies every element by the single value held in `s`.
    pub fn scale_by(self, s: Var<'g>) -> Result<Var<'g>> {
        let sid = self.graph.owns(s)?;
        let sv = s.value();
        let factor = sv.item().ok_or_else(|| TensorError::InvalidShape {
            op: "scale_by",
            shape: sv.shape().to_vec(),
            reason: "scale must hold exactly one value".into(),
        })?;
        let v = self.map(|x| x * factor);
        Ok(self.binary(s, v, Op::ScaleBy { x: self.id, s: sid }))
    }

    pub fn tanh(self) -> Var<'g> {
        let v = self.map(f64::tanh);
        self.unary(v, Op::Tanh { x: self.id })
    }

    /// Sigmoid-weighted linear unit `x·σ(x)`.
    pub fn silu(self) -> Var<'g> {
        let v = self.map(|x| x * kernels::sigmoid(x));
        self.unary(v, Op::Silu { x: self.id })
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'g> {
        let x = self.value();
        let n = *x.shape().last().expect("rank >= 1");
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.unary(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::Softmax { x: self.id },
        )
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(self, gain: Var<'g>, bias: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let gid = self.graph.owns(gain)?;
        let bid = self.graph.owns(bias)?;
        let (x, g, b) = (self.value(), gain.value(), bias.value());
        let n = *x.shape().last().expect("rank >= 1");
        for p in [&g, &b] {
            if p.ndim() != 1 || p.numel() != n {
                return Err(mismatch("layer_norm", &x, p));
            }
        }
        let rows = x.numel() / n;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let rg =
            self.graph.requires(self.id) || self.graph.requires(gid) || self.graph.requires(bid);
        Ok(self.graph.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LayerNorm {
                x: self.id,
                gain: gid,
                bias: bid,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean over `axis`, removing it (a rank-1 input yields shape `[1]`).
    pub fn mean(self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        if axis >= x.ndim() {
            return Err(TensorError::AxisOutOfRange {
                op: "mean",
                axis,
                ndim: x.ndim(),
            });
        }
        let (outer, len, inner) = kernels::split_axis(x.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &x.data()[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for d in data.iter_mut() {
            *d /= len as f64;
        }
        let mut shape: Vec<usize> = x.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.unary(
            Tensor::from_parts(shape, data),
            Op::Mean { x: self.id, axis },
        ))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'g> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum { x: self.id })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let n = check_shape("reshape", shape)?;
        if n != x.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let v = Tensor::from_parts(shape.to_vec(), x.data().to_vec());
        Ok(self.unary(v, Op::Reshape { x: self.id }))
    }

    /// Reorders axes so output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let mut seen = vec![false; x.ndim()];
        let valid = axes.len() == x.ndim()
            && axes
                .iter()
                .all(|&a| a < x.ndim() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(TensorError::InvalidShape {
                op: "permute",
                shape: x.shape().to_vec(),
                reason: format!("{axes:?} is not a permutation of the axes"),
            });
        }
        let data = kernels::permute(x.data(), x.shape(), axes);
        let shape = axes.iter().map(|&a| x.shape()[a]).collect();
        Ok(self.unary(
            Tensor::from_parts(shape, data),
            Op::Permute {
                x: self.id,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'g>> {
        let nd = self.value().ndim();
        if nd < 2 {
            return Err(TensorError::AxisOutOfRange {
                op: "transpose",
                axis: 1,
                ndim: nd,
            });
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        if axis >= x.ndim() {
            return Err(TensorError::AxisOutOfRange {
                op: "narrow",
                axis,
                ndim: x.ndim(),
            });
        }
        if len == 0 || start + len > x.shape()[axis] {
            return Err(TensorError::IndexOutOfRange {
                op: "narrow",
                index: start + len,
                extent: x.shape()[axis],
            });
        }
        let (outer, extent, inner) = kernels::split_axis(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.unary(
            Tensor::from_parts(shape, data),
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    /// Inserts a new axis at position `axis` holding `count` copies.
    pub fn expand(self, axis: usize, count: usize) -> Result<Var<'g>> {
        let x = self.value();
        if axis > x.ndim() {
            return Err(TensorError::AxisOutOfRange {
                op: "expand",
                axis,
                ndim: x.ndim(),
            });
        }
        if count == 0 {
            return Err(TensorError::InvalidShape {
                op: "expand",
                shape: x.shape().to_vec(),
                reason: "count must be positive".into(),
            });
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let inner: usize = x.shape()[axis..].iter().product();
        let mut data = Vec::with_capacity(x.numel() * count);
        for o in 0..outer {
            let chunk = &x.data()[o * inner..(o + 1) * inner];
            for _ in 0..count {
                data.extend_from_slice(chunk);
            }
        }
        let mut shape = x.shape().to_vec();
        shape.insert(axis, count);
        Ok(self.unary(
            Tensor::from_parts(shape, data),
            Op::Expand { x: self.id, axis },
        ))
    }

    /// Mean squared difference over all elements, shape `[1]`.
    pub fn mse(self, target: Var<'g>) -> Result<Var<'g>> {
        let (d, b) = self.zip_same(target, "mse", |x, y| x - y)?;
        let n = d.numel() as f64;
        let v = d.data().iter().map(|e| e * e).sum::<f64>() / n;
        Ok(self.binary(target, Tensor::scalar(v), Op::Mse { a: self.id, b }))
    }

    /// Rotates consecutive pairs `(2i, 2i+1)` of the last axis by
    /// `positions[f] · base^(-2i/d)`, where `f` indexes the second-to-last axis.
    pub fn rotary(self, positions: &[f64], base: f64) -> Result<Var<'g>> {
        let x = self.value();
        let nd = x.ndim();
        if nd < 2 || !x.shape()[nd - 1].is_multiple_of(2) {
            return Err(TensorError::InvalidShape {
                op: "rotary",
                shape: x.shape().to_vec(),
                reason: "last axis must be even and rank at least 2".into(),
            });
        }
        let (frames, d) = (x.shape()[nd - 2], x.shape()[nd - 1]);
        if positions.len() != frames {
            return Err(TensorError::ShapeMismatch {
                op: "rotary",
                lhs: x.shape().to_vec(),
                rhs: vec![positions.len()],
            });
        }
        let half = d / 2;
        let mut cos = Vec::with_capacity(frames * half);
        let mut sin = Vec::with_capacity(frames * half);
        for &p in positions {
            for i in 0..half {
                let theta = p * base.powf(-2.0 * i as f64 / d as f64);
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        let mut data = x.data().to_vec();
        rotate_pairs(&mut data, &cos, &sin, frames, d, 1.0);
        Ok(self.unary(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::Rotary {
                x: self.id,
                cos,
                sin,
            },
        ))
    }
}

/// In-place pair rotation; `direction = -1` applies the inverse rotation.
pub(crate) fn rotate_pairs(
    data: &mut [f64],
    cos: &[f64],
    sin: &[f64],
    frames: usize,
    d: usize,
    direction: f64,
) {
    let half = d / 2;
    for (r, row) in data.chunks_mut(d).enumerate() {
        let f = r % frames;
        for i in 0..half {
            let (c, s) = (cos[f * half + i], direction * sin[f * half + i]);
            let (x0, x1) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = x0 * c - x1 * s;
            row[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}

pub(crate) struct MatMulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub shared_rhs: bool,
}

pub(crate) fn matmul_dims(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<MatMulDims> {
    let (sa, sb) = (a.shape(), b.shape());
    let err = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: sa.to_vec(),
        rhs: sb.to_vec(),
    };
    if sa.len() < 2 || sb.len() < 2 {
        return Err(err());
    }
    let (na, nb) = (sa.len(), sb.len());
    let k = sa[na - 1];
    let (kb, n) = if trans_b {
        (sb[nb - 1], sb[nb - 2])
    } else {
        (sb[nb - 2], sb[nb - 1])
    };
    if k != kb {
        return Err(err());
    }
    if nb == 2 {
        let m = a.numel() / k;
        return Ok(MatMulDims {
            batch: 1,
            m,
            k,
            n,
            shared_rhs: true,
        });
    }
    if na != nb || sa[..na - 2] != sb[..nb - 2] {
        return Err(err());
    }
    Ok(MatMulDims {
        batch: sa[..na - 2].iter().product(),
        m: sa[na - 2],
        k,
        n,
        shared_rhs: false,
    })
}

pub(crate) fn rhs_view(b: &[f64], offset: usize, k: usize, n: usize, trans_b: bool) -> MatRef<'_> {
    if trans_b {
        MatRef::transposed(b, offset, k)
    } else {
        MatRef::rows(b, offset, n)
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let d = matmul_dims(a, b, trans_b)?;
    let mut out = vec![0.0; d.batch * d.m * d.n];
    for i in 0..d.batch {
        let b_off = if d.shared_rhs { 0 } else { i * d.k * d.n };
        gemm(
            d.m,
            d.k,
            d.n,
            MatRef::rows(a.data(), i * d.m * d.k, d.k),
            rhs_view(b.data(), b_off, d.k, d.n, trans_b),
            &mut out,
            i * d.m * d.n,
            0.0,
        );
    }
    let mut shape = a.shape()[..a.ndim() - 1].to_vec();
    shape.push(d.n);
    Ok(Tensor::from_parts(shape, out))
}
