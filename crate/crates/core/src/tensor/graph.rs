use super::conv::{self, ConvGeometry};
use super::{axis_extents, leading_broadcastable, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    Relu {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum {
        x: Var,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LogSumExp {
        x: Var,
        axis: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of tensor operations.
///
/// Nodes are appended in execution order, so inputs always precede the nodes
/// that consume them and a single reverse sweep is a valid topological
/// traversal.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf { param: None })
    }

    /// Inserts a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Inserts a copy of a stored parameter as a gradient-tracking leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let mut t = store.get(id).clone();
        t.zero_grad();
        t.set_requires_grad(true);
        self.push(t, Op::Leaf { param: Some(id) })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Gradients accumulated on parameter leaves.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes.iter().filter_map(|n| match n.op {
            Op::Leaf { param: Some(id) } => n.value.grad().map(|g| (id, g)),
            _ => None,
        })
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_result(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        let value = Tensor::new(shape, data)
            .expect("op produced inconsistent shape")
            .with_requires_grad(requires_grad);
        self.push(value, op)
    }

    fn check_broadcast(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if leading_broadcastable(sa, sb) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: shape {sb:?} does not broadcast to {sa:?}"
            )))
        }
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.check_broadcast(a, b, what)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let nb = tb.numel();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % nb]))
            .collect();
        let shape = ta.shape().to_vec();
        Ok(self.push_result(shape, data, op, &[a, b]))
    }

    /// Elementwise `a + b`; `b` may broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let shape = t.shape().to_vec();
        self.push_result(shape, data, Op::Scale { x, factor }, &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// Matrix product of an `m×k` and a `k×n` tensor.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => {
                return Err(Error::shape(format!(
                    "matmul needs m×k and k×n operands, got {sa:?} and {sb:?}"
                )))
            }
        };
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        Ok(self.push_result(vec![m, n], data, Op::MatMul { a, b }, &[a, b]))
    }

    /// 2-D cross-correlation of an N×C×H×W input with an O×C×kh×kw kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.value(input).shape(), self.value(kernel).shape(), stride, padding)?;
        let data = conv::forward(&geom, self.value(input).data(), self.value(kernel).data());
        Ok(self.push_result(
            geom.output_shape().to_vec(),
            data,
            Op::Conv2d { input, kernel, geom },
            &[input, kernel],
        ))
    }

    /// Adds a per-channel bias `[C]` to an `N×C×…` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let channels = match (tx.shape(), tb.shape()) {
            ([_, c, ..], [cb]) if c == cb => *c,
            (sx, sb) => return Err(Error::shape(format!("channel bias {sb:?} does not match input {sx:?}"))),
        };
        let (outer, _, inner) = axis_extents(tx.shape(), 1)?;
        let mut data = tx.data().to_vec();
        for o in 0..outer {
            for c in 0..channels {
                let b = tb.data()[c];
                data[(o * channels + c) * inner..][..inner]
                    .iter_mut()
                    .for_each(|v| *v += b);
            }
        }
        let shape = tx.shape().to_vec();
        Ok(self.push_result(shape, data, Op::AddChannelBias { x, bias }, &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = t.shape().to_vec();
        self.push_result(shape, data, Op::Relu { x }, &[x])
    }

    /// Mean over the spatial axes of an N×C×H×W tensor, giving N×C.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.shape() else {
            return Err(Error::shape(format!(
                "global_avg_pool expects N×C×H×W, got {:?}",
                t.shape()
            )));
        };
        let (n, c, hw) = (*n, *c, h * w);
        let data = t
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self.push_result(vec![n, c], data, Op::GlobalAvgPool { x }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let data = t.into_data();
        Ok(self.push_result(shape.to_vec(), data, Op::Reshape { x }, &[x]))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, extent, inner) = axis_extents(t.shape(), axis)?;
        if len == 0 || start + len > extent {
            return Err(Error::shape(format!(
                "narrow [{start}, {}) out of range for axis {axis} of extent {extent}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&t.data()[(o * extent + start) * inner..][..len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        Ok(self.push_result(shape, data, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push_result(vec![], vec![s], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, data) = self.reduce(x, axis, |row| row.iter().sum())?;
        Ok(self.push_result(shape, data, Op::SumAxis { x, axis }, &[x]))
    }

    /// `log Σ exp` along `axis` (removing it), shifted by the row maximum.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, data) = self.reduce(x, axis, logsumexp_row)?;
        Ok(self.push_result(shape, data, Op::LogSumExp { x, axis }, &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let data = self.map_rows(x, axis, |row, out| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            out.iter_mut().zip(row).for_each(|(o, &v)| *o = (v - m).exp());
            let total: f64 = out.iter().sum();
            out.iter_mut().for_each(|o| *o /= total);
        })?;
        let shape = self.value(x).shape().to_vec();
        Ok(self.push_result(shape, data, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let data = self.map_rows(x, axis, |row, out| {
            let lse = logsumexp_row(row);
            out.iter_mut().zip(row).for_each(|(o, &v)| *o = v - lse);
        })?;
        let shape = self.value(x).shape().to_vec();
        Ok(self.push_result(shape, data, Op::LogSoftmax { x, axis }, &[x]))
    }

    fn reduce(&self, x: Var, axis: usize, f: impl Fn(&[f64]) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let t = self.value(x);
        let (outer, len, inner) = axis_extents(t.shape(), axis)?;
        let mut row = vec![0.0; len];
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                for (k, r) in row.iter_mut().enumerate() {
                    *r = t.data()[(o * len + k) * inner + i];
                }
                out.push(f(&row));
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok((shape, out))
    }

    fn map_rows(&self, x: Var, axis: usize, f: impl Fn(&[f64], &mut [f64])) -> Result<Vec<f64>> {
        let t = self.value(x);
        let (outer, len, inner) = axis_extents(t.shape(), axis)?;
        let mut data = vec![0.0; t.numel()];
        let mut row = vec![0.0; len];
        let mut res = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (k, r) in row.iter_mut().enumerate() {
                    *r = t.data()[(o * len + k) * inner + i];
                }
                f(&row, &mut res);
                for (k, r) in res.iter().enumerate() {
                    data[(o * len + k) * inner + i] = *r;
                }
            }
        }
        Ok(data)
    }

    /// Reverse sweep from `loss`, accumulating `∂loss/∂leaf` into every
    /// gradient-tracking leaf. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.value.requires_grad() {
                continue;
            }
            let mut send = |v: Var, contrib: Vec<f64>| {
                if self.nodes[v.0].value.requires_grad() {
                    match &mut grads[v.0] {
                        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                        slot @ None => *slot = Some(contrib),
                    }
                }
            };
            match node.op {
                Op::Leaf { .. } => leaf_grads.push((idx, g)),
                Op::Add { a, b } => {
                    send(b, fold_broadcast(&g, self.value(b).numel()));
                    send(a, g);
                }
                Op::Sub { a, b } => {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    send(b, fold_broadcast(&neg, self.value(b).numel()));
                    send(a, g);
                }
                Op::Mul { a, b } => {
                    let (ta, tb) = (self.value(a).data(), self.value(b).data());
                    let nb = tb.len();
                    let ga = g.iter().enumerate().map(|(i, v)| v * tb[i % nb]).collect();
                    let prod: Vec<f64> = g.iter().zip(ta).map(|(v, x)| v * x).collect();
                    send(b, fold_broadcast(&prod, nb));
                    send(a, ga);
                }
                Op::Scale { x, factor } => send(x, g.iter().map(|v| v * factor).collect()),
                Op::MatMul { a, b } => {
                    let (ta, tb) = (self.value(a), self.value(b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    // dA = dC·Bᵀ, dB = Aᵀ·dC
                    let mut ga = vec![0.0; m * k];
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = ta.data()[i * k + p];
                            let mut acc = 0.0;
                            for j in 0..n {
                                let gij = g[i * n + j];
                                acc += gij * tb.data()[p * n + j];
                                gb[p * n + j] += a_ip * gij;
                            }
                            ga[i * k + p] = acc;
                        }
                    }
                    send(a, ga);
                    send(b, gb);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    ref geom,
                } => {
                    let need_in = self.requires_grad(input);
                    let need_k = self.requires_grad(kernel);
                    let (gi, gk) = conv::backward(
                        geom,
                        self.value(input).data(),
                        self.value(kernel).data(),
                        &g,
                        need_in,
                        need_k,
                    );
                    if need_in {
                        send(input, gi);
                    }
                    if need_k {
                        send(kernel, gk);
                    }
                }
                Op::AddChannelBias { x, bias } => {
                    let (outer, channels, inner) = axis_extents(self.value(x).shape(), 1)?;
                    let mut gb = vec![0.0; channels];
                    for o in 0..outer {
                        for (c, acc) in gb.iter_mut().enumerate() {
                            *acc += g[(o * channels + c) * inner..][..inner].iter().sum::<f64>();
                        }
                    }
                    send(bias, gb);
                    send(x, g);
                }
                Op::Relu { x } => {
                    let xs = self.value(x).data();
                    send(
                        x,
                        g.iter()
                            .zip(xs)
                            .map(|(v, &xv)| if xv > 0.0 { *v } else { 0.0 })
                            .collect(),
                    );
                }
                Op::GlobalAvgPool { x } => {
                    let shape = self.value(x).shape();
                    let hw = shape[2] * shape[3];
                    let mut gx = Vec::with_capacity(self.value(x).numel());
                    for v in &g {
                        gx.extend(std::iter::repeat_n(v / hw as f64, hw));
                    }
                    send(x, gx);
                }
                Op::Reshape { x } => send(x, g),
                Op::Narrow { x, axis, start } => {
                    let (outer, extent, inner) = axis_extents(self.value(x).shape(), axis)?;
                    let len = node.value.shape()[axis];
                    let mut gx = vec![0.0; self.value(x).numel()];
                    for o in 0..outer {
                        gx[(o * extent + start) * inner..][..len * inner]
                            .copy_from_slice(&g[o * len * inner..][..len * inner]);
                    }
                    send(x, gx);
                }
                Op::Sum { x } => send(x, vec![g[0]; self.value(x).numel()]),
                Op::SumAxis { x, axis } => {
                    let (outer, len, inner) = axis_extents(self.value(x).shape(), axis)?;
                    let mut gx = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for k in 0..len {
                            gx[(o * len + k) * inner..][..inner].copy_from_slice(&g[o * inner..][..inner]);
                        }
                    }
                    send(x, gx);
                }
                Op::Softmax { x, axis } => {
                    // dx = y ⊙ (g − Σ g·y)
                    let y = node.value.data();
                    let gx = row_backward(self.value(x).shape(), axis, |row_idx| {
                        let dot: f64 = row_idx.iter().map(|&i| g[i] * y[i]).sum();
                        row_idx.iter().map(|&i| y[i] * (g[i] - dot)).collect()
                    })?;
                    send(x, gx);
                }
                Op::LogSoftmax { x, axis } => {
                    // dx = g − softmax·Σ g
                    let y = node.value.data();
                    let gx = row_backward(self.value(x).shape(), axis, |row_idx| {
                        let total: f64 = row_idx.iter().map(|&i| g[i]).sum();
                        row_idx.iter().map(|&i| g[i] - y[i].exp() * total).collect()
                    })?;
                    send(x, gx);
                }
                Op::LogSumExp { x, axis } => {
                    // dx = g_out · softmax(x)
                    let xs = self.value(x).data();
                    let out = node.value.data();
                    let (_, len, inner) = axis_extents(self.value(x).shape(), axis)?;
                    let gx = row_backward(self.value(x).shape(), axis, |row_idx| {
                        let first = row_idx[0];
                        let r = (first / (len * inner)) * inner + first % inner;
                        row_idx.iter().map(|&i| g[r] * (xs[i] - out[r]).exp()).collect()
                    })?;
                    send(x, gx);
                }
            }
        }

        for (idx, g) in leaf_grads {
            self.nodes[idx].value.accumulate_grad(&g);
        }
        Ok(())
    }
}

/// Sums a gradient over the repeats of a leading-broadcast operand.
fn fold_broadcast(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for (i, v) in g.iter().enumerate() {
        out[i % n] += v;
    }
    out
}

/// Applies a per-row gradient rule along `axis`; `rule` receives the flat
/// indices of one row and returns that row's input gradient.
fn row_backward(shape: &[usize], axis: usize, rule: impl Fn(&[usize]) -> Vec<f64>) -> Result<Vec<f64>> {
    let (outer, len, inner) = axis_extents(shape, axis)?;
    let mut gx = vec![0.0; outer * len * inner];
    let mut idx = vec![0usize; len];
    for o in 0..outer {
        for i in 0..inner {
            for (k, slot) in idx.iter_mut().enumerate() {
                *slot = (o * len + k) * inner + i;
            }
            for (k, v) in rule(&idx).into_iter().enumerate() {
                gx[idx[k]] = v;
            }
        }
    }
    Ok(gx)
}

pub(crate) fn logsumexp_row(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..][..n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            row.iter_mut().zip(&b[p * n..][..n]).for_each(|(c, b)| *c += a_ip * b);
        }
    }
    c
}
