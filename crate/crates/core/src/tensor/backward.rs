use super::graph::{matmul_dims, rotate_pairs, Graph, Node, Op, Var};
use super::kernels::{self, gemm, MatRef};
use super::{Result, Tensor, TensorError};

/// Gradients of a scalar loss with respect to every leaf that requires one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id()).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id()).and_then(Option::take)
    }
}

struct Accumulator<'a> {
    nodes: &'a [Node],
    grads: Vec<Option<Vec<f64>>>,
    factor: f64,
}

impl<'a> Accumulator<'a> {
    fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn add(&mut self, id: usize, mut contribution: Vec<f64>) {
        if !self.wants(id) {
            return;
        }
        if self.factor != 1.0 {
            contribution.iter_mut().for_each(|v| *v *= self.factor);
        }
        match &mut self.grads[id] {
            Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn value(&self, id: usize) -> &'a Tensor {
        &self.nodes[id].value
    }
}

impl Graph {
    /// Reverse sweep from a single-element `loss`.
    ///
    /// Gradients are summed over every consumer of a node. Only leaf
    /// gradients are retained in the result.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(self, loss.graph()) {
            return Err(TensorError::ForeignVar);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id()];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut acc = Accumulator {
            nodes: &nodes,
            grads: (0..nodes.len()).map(|_| None).collect(),
            factor: 1.0,
        };
        if root.requires_grad {
            acc.grads[loss.id()] = Some(vec![1.0]);
        }
        let fault = self.fault.get();
        for id in (0..=loss.id()).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = acc.grads[id].take() else {
                continue;
            };
            acc.factor = if fault == Some(node.op.kind()) {
                1.25
            } else {
                1.0
            };
            propagate(&mut acc, node, &g);
        }
        let grads = acc
            .grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|data| Tensor::from_parts(n.value.shape().to_vec(), data)))
            .collect();
        Ok(Gradients { grads })
    }
}

fn propagate(acc: &mut Accumulator<'_>, node: &Node, g: &[f64]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => matmul_backward(acc, *a, *b, *trans_b, g),
        Op::Add { a, b } => {
            acc.add(*a, g.to_vec());
            acc.add(*b, g.to_vec());
        }
        Op::Sub { a, b } => {
            acc.add(*a, g.to_vec());
            acc.add(*b, g.iter().map(|v| -v).collect());
        }
        Op::Mul { a, b } => {
            let (av, bv) = (acc.value(*a).data(), acc.value(*b).data());
            let da = g.iter().zip(bv).map(|(g, b)| g * b).collect();
            let db = g.iter().zip(av).map(|(g, a)| g * a).collect();
            acc.add(*a, da);
            acc.add(*b, db);
        }
        Op::AddBias { x, bias } => {
            let n = acc.value(*bias).numel();
            let mut db = vec![0.0; n];
            for row in g.chunks(n) {
                db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
            acc.add(*x, g.to_vec());
            acc.add(*bias, db);
        }
        Op::Scale { x, factor } => acc.add(*x, g.iter().map(|v| v * factor).collect()),
        Op::AddScalar { x } => acc.add(*x, g.to_vec()),
        Op::ScaleBy { x, s } => {
            let sv = acc.value(*s).data()[0];
            let xv = acc.value(*x).data();
            let ds = g.iter().zip(xv).map(|(g, x)| g * x).sum::<f64>();
            acc.add(*x, g.iter().map(|v| v * sv).collect());
            acc.add(*s, vec![ds]);
        }
        Op::Tanh { x } => {
            let dx = g
                .iter()
                .zip(out.data())
                .map(|(g, y)| g * (1.0 - y * y))
                .collect();
            acc.add(*x, dx);
        }
        Op::Silu { x } => {
            let dx = g
                .iter()
                .zip(acc.value(*x).data())
                .map(|(g, &x)| {
                    let s = kernels::sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                })
                .collect();
            acc.add(*x, dx);
        }
        Op::Softmax { x } => {
            let n = *out.shape().last().expect("rank >= 1");
            let mut dx = vec![0.0; g.len()];
            for ((d, gr), y) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    d[j] = y[j] * (gr[j] - dot);
                }
            }
            acc.add(*x, dx);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gv = acc.value(*gain).data();
            let n = gv.len();
            let mut dx = vec![0.0; g.len()];
            let mut dgain = vec![0.0; n];
            let mut dbias = vec![0.0; n];
            let mut dxhat = vec![0.0; n];
            for (r, gr) in g.chunks(n).enumerate() {
                let h = &xhat[r * n..(r + 1) * n];
                let mut sum = 0.0;
                let mut sum_h = 0.0;
                for j in 0..n {
                    dxhat[j] = gr[j] * gv[j];
                    sum += dxhat[j];
                    sum_h += dxhat[j] * h[j];
                    dgain[j] += gr[j] * h[j];
                    dbias[j] += gr[j];
                }
                let scale = inv_std[r] / n as f64;
                for j in 0..n {
                    dx[r * n + j] = scale * (n as f64 * dxhat[j] - sum - h[j] * sum_h);
                }
            }
            acc.add(*x, dx);
            acc.add(*gain, dgain);
            acc.add(*bias, dbias);
        }
        Op::Mean { x, axis } => {
            let shape = acc.value(*x).shape().to_vec();
            let (outer, len, inner) = kernels::split_axis(&shape, *axis);
            let mut dx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for k in 0..len {
                    for i in 0..inner {
                        dx[(o * len + k) * inner + i] = g[o * inner + i] / len as f64;
                    }
                }
            }
            acc.add(*x, dx);
        }
        Op::Sum { x } => {
            let n = acc.value(*x).numel();
            acc.add(*x, vec![g[0]; n]);
        }
        Op::Reshape { x } => acc.add(*x, g.to_vec()),
        Op::Permute { x, axes } => {
            let dx = kernels::permute(g, out.shape(), &kernels::inverse_axes(axes));
            acc.add(*x, dx);
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = kernels::split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &id in inputs {
                let len = acc.value(id).shape()[*axis];
                if acc.wants(id) {
                    let mut dx = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        dx.extend_from_slice(&g[base..base + len * inner]);
                    }
                    acc.add(id, dx);
                }
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let shape = acc.value(*x).shape().to_vec();
            let (outer, extent, inner) = kernels::split_axis(&shape, *axis);
            let len = out.shape()[*axis];
            let mut dx = vec![0.0; outer * extent * inner];
            for o in 0..outer {
                let dst = (o * extent + start) * inner;
                let src = o * len * inner;
                dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            acc.add(*x, dx);
        }
        Op::Expand { x, axis } => {
            let xs = acc.value(*x).shape().to_vec();
            let outer: usize = xs[..*axis].iter().product();
            let inner: usize = xs[*axis..].iter().product();
            let count = out.shape()[*axis];
            let mut dx = vec![0.0; outer * inner];
            for o in 0..outer {
                for c in 0..count {
                    let src = &g[(o * count + c) * inner..(o * count + c + 1) * inner];
                    dx[o * inner..(o + 1) * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += s);
                }
            }
            acc.add(*x, dx);
        }
        Op::Embedding { table, ids } => {
            let t = acc.value(*table);
            let dim = t.shape()[1];
            let mut dt = vec![0.0; t.numel()];
            for (r, &id) in ids.iter().enumerate() {
                dt[id * dim..(id + 1) * dim]
                    .iter_mut()
                    .zip(&g[r * dim..(r + 1) * dim])
                    .for_each(|(d, s)| *d += s);
            }
            acc.add(*table, dt);
        }
        Op::Mse { a, b } => {
            let (av, bv) = (acc.value(*a).data(), acc.value(*b).data());
            let scale = 2.0 * g[0] / av.len() as f64;
            let da: Vec<f64> = av.iter().zip(bv).map(|(a, b)| scale * (a - b)).collect();
            let db = da.iter().map(|v| -v).collect();
            acc.add(*a, da);
            acc.add(*b, db);
        }
        Op::Rotary { x, cos, sin } => {
            let nd = out.ndim();
            let (frames, d) = (out.shape()[nd - 2], out.shape()[nd - 1]);
            let mut dx = g.to_vec();
            rotate_pairs(&mut dx, cos, sin, frames, d, -1.0);
            acc.add(*x, dx);
        }
    }
}

fn matmul_backward(acc: &mut Accumulator<'_>, a: usize, b: usize, trans_b: bool, g: &[f64]) {
    let (av, bv) = (acc.value(a), acc.value(b));
    let d = matmul_dims(av, bv, trans_b).expect("shapes validated in forward");
    if acc.wants(a) {
        // dA = dC · Bᵀ
        let mut da = vec![0.0; av.numel()];
        for i in 0..d.batch {
            let b_off = if d.shared_rhs { 0 } else { i * d.k * d.n };
            let bt = if trans_b {
                MatRef::rows(bv.data(), b_off, d.k)
            } else {
                MatRef::transposed(bv.data(), b_off, d.n)
            };
            gemm(
                d.m,
                d.n,
                d.k,
                MatRef::rows(g, i * d.m * d.n, d.n),
                bt,
                &mut da,
                i * d.m * d.k,
                0.0,
            );
        }
        acc.add(a, da);
    }
    if acc.wants(b) {
        let mut db = vec![0.0; bv.numel()];
        for i in 0..d.batch {
            let (a_off, g_off) = (i * d.m * d.k, i * d.m * d.n);
            let b_off = if d.shared_rhs { 0 } else { i * d.k * d.n };
            if trans_b {
                // stored [n, k]: dB = dCᵀ · A
                gemm(
                    d.n,
                    d.m,
                    d.k,
                    MatRef::transposed(g, g_off, d.n),
                    MatRef::rows(av.data(), a_off, d.k),
                    &mut db,
                    b_off,
                    0.0,
                );
            } else {
                // stored [k, n]: dB = Aᵀ · dC
                gemm(
                    d.k,
                    d.m,
                    d.n,
                    MatRef::transposed(av.data(), a_off, d.k),
                    MatRef::rows(g, g_off, d.n),
                    &mut db,
                    b_off,
                    0.0,
                );
            }
        }
        acc.add(b, db);
    }
}
