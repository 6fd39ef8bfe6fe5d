use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{matmul_acc, matmul_acc_at, matmul_acc_bt};
use super::{broadcast_shape, check_axes, describe, permute_data, Scalar, Tensor};
use crate::error::{bail, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Silu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    MatMul(Var, Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Embedding(Var, Vec<usize>),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<S> },
    Rope { x: Var, cos: Vec<S>, sin: Vec<S>, seq: usize, heads: usize, head_dim: usize },
    RepeatKv(Var, usize),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<S>, probs: Vec<S>, total_weight: S },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// Records operations in creation order, which is a topological order of the
/// computation graph, and replays them backwards to compute gradients.
#[derive(Debug)]
pub struct Tape<S = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Gradients accumulate only into leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<S>> {
        self.nodes[v.0].grad.take()
    }

    /// Moves a value out of the tape, leaving an empty tensor behind.
    pub fn take_value(&mut self, v: Var) -> Tensor<S> {
        core::mem::replace(&mut self.nodes[v.0].value, Tensor { shape: vec![0], data: Vec::new() })
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<(Tensor<S>, Vec<usize>)> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(ta.shape(), tb.shape())?;
        let n: usize = shape.iter().product();
        let (na, nb) = (ta.numel(), tb.numel());
        let data = (0..n).map(|i| f(ta.data[i % na], tb.data[i % nb])).collect();
        Ok((Tensor { shape: shape.clone(), data }, shape))
    }

    /// Elementwise sum; the operand with fewer dimensions broadcasts over the leading ones.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = S::of(c);
        let t = self.map(a, |x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    fn map(&self, a: Var, f: impl Fn(S) -> S) -> Tensor<S> {
        let src = &self.nodes[a.0].value;
        Tensor { shape: src.shape.clone(), data: src.data.iter().map(|&x| f(x)).collect() }
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.map(a, silu);
        self.push(t, Op::Silu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.map(a, S::exp);
        self.push(t, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.map(a, S::ln);
        self.push(t, Op::Log(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.map(a, S::sqrt);
        self.push(t, Op::Sqrt(a), &[a])
    }

    /// Batched product `[.., m, k] x [.., k, n]`. `b` may also be a plain
    /// `[k, n]` matrix shared by every batch entry.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let dims = matmul_dims(ta.shape(), tb.shape())?;
        let mut out = vec![S::zero(); dims.batch * dims.m * dims.n];
        for bi in 0..dims.batch {
            let b_off = if dims.shared_b { 0 } else { bi * dims.k * dims.n };
            matmul_acc(
                &ta.data[bi * dims.m * dims.k..(bi + 1) * dims.m * dims.k],
                &tb.data[b_off..b_off + dims.k * dims.n],
                &mut out[bi * dims.m * dims.n..(bi + 1) * dims.m * dims.n],
                dims.m,
                dims.k,
                dims.n,
            );
        }
        let mut shape = ta.shape()[..ta.shape().len() - 1].to_vec();
        shape.push(dims.n);
        let t = Tensor { shape, data: out };
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// Softmax over the last dimension after adding an optional mask.
    ///
    /// The mask broadcasts over leading dimensions; `-inf` entries get zero
    /// probability. A row whose entries are all masked yields all zeros.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor<S>>) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let Some(&n) = tx.shape().last() else {
            bail!(Shape, "softmax needs at least one dimension");
        };
        if n == 0 {
            bail!(Shape, "softmax over an empty last dimension");
        }
        if let Some(m) = mask {
            let shape = broadcast_shape(tx.shape(), m.shape())?;
            if shape != tx.shape() {
                bail!(Shape, "mask {:?} is larger than scores {:?}", m.shape(), tx.shape());
            }
        }
        let mut out = vec![S::zero(); tx.numel()];
        let mut row = vec![S::zero(); n];
        for (r, o) in out.chunks_mut(n).enumerate() {
            let base = r * n;
            for (j, slot) in row.iter_mut().enumerate() {
                let mut v = tx.data[base + j];
                if let Some(m) = mask {
                    v = v + m.data[(base + j) % m.numel()];
                }
                *slot = v;
            }
            softmax_into(&row, o);
        }
        let t = Tensor { shape: tx.shape.clone(), data: out };
        Ok(self.push(t, Op::Softmax(x), &[x]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().fold(S::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0].value;
        let s = src.data.iter().fold(S::zero(), |acc, &v| acc + v);
        let m = s / S::of(src.numel().max(1) as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape, self.nodes[a.0].value.data.clone())?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        check_axes(axes, src.shape().len())?;
        let (data, shape) = permute_data(&src.data, &src.shape, axes);
        let t = Tensor { shape, data };
        Ok(self.push(t, Op::Permute(a, axes.to_vec()), &[a]))
    }

    /// Gathers rows of a `[rows, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        let [rows, dim] = t.shape() else {
            bail!(Shape, "embedding table must be 2-D, got {}", describe(t.shape()));
        };
        let (rows, dim) = (*rows, *dim);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                bail!(OutOfRange, "token id {id} outside vocabulary of {rows}");
            }
            data.extend_from_slice(&t.data[id * dim..(id + 1) * dim]);
        }
        let out = Tensor { shape: vec![ids.len(), dim], data };
        Ok(self.push(out, Op::Embedding(table, ids.to_vec()), &[table]))
    }

    /// `x / sqrt(mean(x^2) + eps) * gain` over the last dimension.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (tx, tg) = (&self.nodes[x.0].value, &self.nodes[gain.0].value);
        let d = *tx.shape().last().unwrap_or(&0);
        if tg.shape() != [d] || d == 0 {
            bail!(Shape, "rms_norm gain {:?} does not match input {:?}", tg.shape(), tx.shape());
        }
        let eps = S::of(eps);
        let inv_d = S::of(1.0 / d as f64);
        let rows = tx.numel() / d;
        let mut inv_rms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(tx.numel());
        for row in tx.data.chunks(d) {
            let ms = row.iter().fold(S::zero(), |acc, &v| acc + v * v) * inv_d;
            let r = S::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            data.extend(row.iter().zip(&tg.data).map(|(&v, &g)| v * r * g));
        }
        let out = Tensor { shape: tx.shape.clone(), data };
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    /// Rotary embedding of `[.., seq, heads, head_dim]` activations.
    ///
    /// Coordinate pairs `(2i, 2i+1)` at position `m` rotate by
    /// `m * theta^(-2i / head_dim)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], theta: f64) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let rank = tx.shape().len();
        if rank < 3 {
            bail!(Shape, "rope expects [.., seq, heads, head_dim], got {}", describe(tx.shape()));
        }
        let (seq, heads, head_dim) = (tx.shape()[rank - 3], tx.shape()[rank - 2], tx.shape()[rank - 1]);
        if head_dim % 2 != 0 {
            bail!(Config, "rotary embedding needs an even head dimension, got {head_dim}");
        }
        if positions.len() != seq {
            bail!(Shape, "{} positions for a sequence of {seq}", positions.len());
        }
        let (cos, sin) = rope_tables::<S>(positions, head_dim, theta);
        let mut data = tx.data.clone();
        rotate(&mut data, &cos, &sin, seq, heads, head_dim, false);
        let out = Tensor { shape: tx.shape.clone(), data };
        let op = Op::Rope { x, cos, sin, seq, heads, head_dim };
        Ok(self.push(out, op, &[x]))
    }

    /// Repeats each key/value head `groups` times along axis 1 of `[batch, kv_heads, seq, dim]`.
    pub fn repeat_kv(&mut self, x: Var, groups: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let [b, kv, s, d] = tx.shape() else {
            bail!(Shape, "repeat_kv expects [batch, kv_heads, seq, dim], got {}", describe(tx.shape()));
        };
        let (b, kv, s, d) = (*b, *kv, *s, *d);
        if groups == 0 {
            bail!(Config, "repeat_kv with zero groups");
        }
        let block = s * d;
        let mut data = Vec::with_capacity(tx.numel() * groups);
        for bi in 0..b {
            for h in 0..kv {
                let src = &tx.data[(bi * kv + h) * block..(bi * kv + h + 1) * block];
                for _ in 0..groups {
                    data.extend_from_slice(src);
                }
            }
        }
        let out = Tensor { shape: vec![b, kv * groups, s, d], data };
        Ok(self.push(out, Op::RepeatKv(x, groups), &[x]))
    }

    /// Weighted mean negative log-likelihood of `targets` under row-softmax of `[n, vocab]` logits.
    ///
    /// Positions with zero weight do not contribute. All-zero weights are an error.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[S]>) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        let [n, v] = tl.shape() else {
            bail!(Shape, "cross_entropy expects [n, vocab] logits, got {}", describe(tl.shape()));
        };
        let (n, v) = (*n, *v);
        if targets.len() != n {
            bail!(Shape, "{} targets for {n} positions", targets.len());
        }
        let weights: Vec<S> = match weights {
            Some(w) if w.len() != n => bail!(Shape, "{} weights for {n} positions", w.len()),
            Some(w) => w.to_vec(),
            None => vec![S::one(); n],
        };
        let total_weight = weights.iter().fold(S::zero(), |acc, &w| acc + w);
        if total_weight <= S::zero() {
            bail!(Empty, "every position is masked out of the loss");
        }
        let mut probs = vec![S::zero(); n * v];
        let mut loss = S::zero();
        for i in 0..n {
            let t = targets[i];
            if t >= v {
                bail!(OutOfRange, "target {t} outside vocabulary of {v}");
            }
            let row = &tl.data[i * v..(i + 1) * v];
            let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
            let sum = row.iter().fold(S::zero(), |acc, &x| acc + (x - max).exp());
            let lse = max + sum.ln();
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            if weights[i] != S::zero() {
                loss = loss + weights[i] * (lse - row[t]);
            }
        }
        let out = Tensor::scalar(loss / total_weight);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), weights, probs, total_weight };
        Ok(self.push(out, op, &[logits]))
    }

    /// Accumulates `d loss / d leaf` into every leaf that requires gradients.
    ///
    /// Intermediate gradients are not retained, so repeated calls add the
    /// same contribution to the leaves again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            bail!(Shape, "backward needs a scalar loss, got {}", describe(self.nodes[loss.0].value.shape()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -S::one() } else { S::one() };
                if let Some(ga) = slot(nodes, grads, *a) {
                    reduce_broadcast(ga, g, S::one());
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    reduce_broadcast(gb, g, sign);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                let (na, nb) = (ta.len(), tb.len());
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (i, &gi) in g.iter().enumerate() {
                        ga[i % na] = ga[i % na] + gi * tb[i % nb];
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % nb] = gb[i % nb] + gi * ta[i % na];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &gi)| *o = *o + gi * *c);
                }
            }
            Op::Silu(a) => {
                let x = &nodes[a.0].value.data;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        let s = sigmoid(xi);
                        *o = *o + gi * s * (S::one() + xi * (S::one() - s));
                    }
                }
            }
            Op::Exp(a) => {
                let y = &node.value.data;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                        *o = *o + gi * yi;
                    }
                }
            }
            Op::Log(a) => {
                let x = &nodes[a.0].value.data;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        *o = *o + gi / xi;
                    }
                }
            }
            Op::Sqrt(a) => {
                let y = &node.value.data;
                let half = S::of(0.5);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                        *o = *o + gi * half / yi;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let d = matmul_dims(ta.shape(), tb.shape())?;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for bi in 0..d.batch {
                        let b_off = if d.shared_b { 0 } else { bi * d.k * d.n };
                        matmul_acc_bt(
                            &g[bi * d.m * d.n..(bi + 1) * d.m * d.n],
                            &tb.data[b_off..b_off + d.k * d.n],
                            &mut ga[bi * d.m * d.k..(bi + 1) * d.m * d.k],
                            d.m,
                            d.k,
                            d.n,
                        );
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for bi in 0..d.batch {
                        let b_off = if d.shared_b { 0 } else { bi * d.k * d.n };
                        matmul_acc_at(
                            &ta.data[bi * d.m * d.k..(bi + 1) * d.m * d.k],
                            &g[bi * d.m * d.n..(bi + 1) * d.m * d.n],
                            &mut gb[b_off..b_off + d.k * d.n],
                            d.m,
                            d.k,
                            d.n,
                        );
                    }
                }
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let n = *p.shape().last().unwrap_or(&1);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, gr), pr) in ga.chunks_mut(n).zip(g.chunks(n)).zip(p.data.chunks(n)) {
                        let dot = gr.iter().zip(pr).fold(S::zero(), |acc, (&gi, &pi)| acc + gi * pi);
                        for ((oj, &gj), &pj) in o.iter_mut().zip(gr).zip(pr) {
                            *oj = *oj + pj * (gj - dot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|o| *o = *o + g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let scale = g[0] / S::of(ga.len().max(1) as f64);
                    ga.iter_mut().for_each(|o| *o = *o + scale);
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &gi)| *o = *o + gi);
                }
            }
            Op::Permute(a, axes) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let (back, _) = permute_data(g, node.value.shape(), &inverse);
                    ga.iter_mut().zip(&back).for_each(|(o, &gi)| *o = *o + gi);
                }
            }
            Op::Embedding(table, ids) => {
                let dim = nodes[table.0].value.shape()[1];
                if let Some(gt) = slot(nodes, grads, *table) {
                    for (row, &id) in g.chunks(dim).zip(ids) {
                        let dst = &mut gt[id * dim..(id + 1) * dim];
                        dst.iter_mut().zip(row).for_each(|(o, &gi)| *o = *o + gi);
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (tx, tg) = (&nodes[x.0].value, &nodes[gain.0].value);
                let d = tg.numel();
                let inv_d = S::of(1.0 / d as f64);
                if let Some(gg) = slot(nodes, grads, *gain) {
                    for ((gr, xr), &r) in g.chunks(d).zip(tx.data.chunks(d)).zip(inv_rms) {
                        for ((o, &gi), &xi) in gg.iter_mut().zip(gr).zip(xr) {
                            *o = *o + gi * xi * r;
                        }
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (((o, gr), xr), &r) in gx.chunks_mut(d).zip(g.chunks(d)).zip(tx.data.chunks(d)).zip(inv_rms) {
                        // d/dx of x*r*w: r*(g*w) - x * r^3 * mean(g*w*x)
                        let dot = gr
                            .iter()
                            .zip(&tg.data)
                            .zip(xr)
                            .fold(S::zero(), |acc, ((&gi, &wi), &xi)| acc + gi * wi * xi);
                        let coef = r * r * r * dot * inv_d;
                        for (((oj, &gj), &wj), &xj) in o.iter_mut().zip(gr).zip(&tg.data).zip(xr) {
                            *oj = *oj + r * gj * wj - xj * coef;
                        }
                    }
                }
            }
            Op::Rope { x, cos, sin, seq, heads, head_dim } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let mut back = g.to_vec();
                    rotate(&mut back, cos, sin, *seq, *heads, *head_dim, true);
                    gx.iter_mut().zip(&back).for_each(|(o, &gi)| *o = *o + gi);
                }
            }
            Op::RepeatKv(a, groups) => {
                let shape = nodes[a.0].value.shape();
                let (b, kv, s, d) = (shape[0], shape[1], shape[2], shape[3]);
                let block = s * d;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for bi in 0..b {
                        for h in 0..kv {
                            let dst = &mut ga[(bi * kv + h) * block..(bi * kv + h + 1) * block];
                            for r in 0..*groups {
                                let src_head = (bi * kv + h) * groups + r;
                                let src = &g[src_head * block..(src_head + 1) * block];
                                dst.iter_mut().zip(src).for_each(|(o, &gi)| *o = *o + gi);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs, total_weight } => {
                let v = nodes[logits.0].value.shape()[1];
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == S::zero() {
                            continue;
                        }
                        let scale = g[0] * w / *total_weight;
                        let row = &mut gl[i * v..(i + 1) * v];
                        for (o, &p) in row.iter_mut().zip(&probs[i * v..(i + 1) * v]) {
                            *o = *o + scale * p;
                        }
                        row[t] = row[t] - scale;
                    }
                }
            }
        }
        Ok(())
    }
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        bail!(Shape, "matmul needs at least 2-D operands, got {a:?} x {b:?}");
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        bail!(Shape, "matmul inner dimensions differ: {a:?} x {b:?}");
    }
    let batch: usize = a[..a.len() - 2].iter().product();
    let shared_b = b.len() == 2;
    if !shared_b && a[..a.len() - 2] != b[..b.len() - 2] {
        bail!(Shape, "matmul batch dimensions differ: {a:?} x {b:?}");
    }
    Ok(MatmulDims { batch, m, k, n, shared_b })
}

/// Gradient buffer of a parent node, or `None` when it needs no gradient.
fn slot<'g, S: Scalar>(nodes: &[Node<S>], grads: &'g mut [Option<Vec<S>>], v: Var) -> Option<&'g mut Vec<S>> {
    let p = &nodes[v.0];
    if !p.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); p.value.numel()]))
}

fn reduce_broadcast<S: Scalar>(dst: &mut [S], g: &[S], sign: S) {
    let n = dst.len();
    for (i, &gi) in g.iter().enumerate() {
        dst[i % n] = dst[i % n] + sign * gi;
    }
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

pub(crate) fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

/// Numerically stable softmax of one row; an all `-inf` row becomes zeros.
pub(crate) fn softmax_into<S: Scalar>(row: &[S], out: &mut [S]) {
    let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
    if max == S::neg_infinity() {
        out.iter_mut().for_each(|o| *o = S::zero());
        return;
    }
    let mut sum = S::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum = sum + *o;
    }
    out.iter_mut().for_each(|o| *o = *o / sum);
}

/// Per-position cosine and sine tables, `[positions.len(), head_dim / 2]`.
pub(crate) fn rope_tables<S: Scalar>(positions: &[usize], head_dim: usize, theta: f64) -> (Vec<S>, Vec<S>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &pos in positions {
        for i in 0..half {
            let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            cos.push(S::of(angle.cos()));
            sin.push(S::of(angle.sin()));
        }
    }
    (cos, sin)
}

/// Rotates consecutive coordinate pairs in place; `inverse` rotates by the negated angle.
pub(crate) fn rotate<S: Scalar>(
    data: &mut [S],
    cos: &[S],
    sin: &[S],
    seq: usize,
    heads: usize,
    head_dim: usize,
    inverse: bool,
) {
    let half = head_dim / 2;
    let per_batch = seq * heads * head_dim;
    for chunk in data.chunks_mut(per_batch) {
        for t in 0..seq {
            let (c, s) = (&cos[t * half..(t + 1) * half], &sin[t * half..(t + 1) * half]);
            for h in 0..heads {
                let v = &mut chunk[(t * heads + h) * head_dim..(t * heads + h + 1) * head_dim];
                for i in 0..half {
                    let (x0, x1) = (v[2 * i], v[2 * i + 1]);
                    let si = if inverse { -s[i] } else { s[i] };
                    v[2 * i] = x0 * c[i] - x1 * si;
                    v[2 * i + 1] = x0 * si + x1 * c[i];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_grad_is_ones_and_square_grad_is_2x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[3.0, 4.0]), true);
        let y = tape.scale(x, 2.0);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 4.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn diamond_graph_sums_both_paths() {
        // y = x*x + exp(x): dy/dx = 2x + exp(x)
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[0.5, -1.0]), true);
        let a = tape.mul(x, x).unwrap();
        let b = tape.exp(x);
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        assert!((g[0] - (1.0 + 0.5f64.exp())).abs() < 1e-12);
        assert!((g[1] - (-2.0 + (-1.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_backward_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let b = tape.leaf(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        let eye = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let d = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(d).data(), tape.value(b).data());
        let bad = tape.leaf(t(&[3, 1], &[1.0, 2.0, 3.0]), false);
        assert!(tape.matmul(a, bad).is_err());
    }

    #[test]
    fn softmax_uniform_shift_and_mask() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[0.0, 0.0, 0.0]), false);
        let p = tape.softmax_rows(x, None).unwrap();
        for &v in tape.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x1 = tape.leaf(t(&[2, 3], &[0.1, 2.0, -1.0, 3.0, 3.0, 0.0]), false);
        let x2 = tape.leaf(t(&[2, 3], &[7.1, 9.0, 6.0, 10.0, 10.0, 7.0]), false);
        let (p1, p2) = (tape.softmax_rows(x1, None).unwrap(), tape.softmax_rows(x2, None).unwrap());
        for (a, b) in tape.value(p1).data().iter().zip(tape.value(p2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let ninf = f64::NEG_INFINITY;
        let mask = t(&[2, 3], &[0.0, ninf, 0.0, ninf, ninf, ninf]);
        let pm = tape.softmax_rows(x1, Some(&mask)).unwrap();
        let v = tape.value(pm).data();
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
        assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn silu_at_zero_and_add_zero_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[0.0, 1.5]), false);
        let s = tape.silu(x);
        assert_eq!(tape.value(s).data()[0], 0.0);
        let z = tape.leaf(t(&[2], &[0.0, 0.0]), false);
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let b = tape.leaf(t(&[2], &[10.0, 20.0]), true);
        let y = tape.sub(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[-9.0, -18.0, -7.0, -16.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[-2.0, -2.0]);
        let bad = tape.leaf(Tensor::zeros(&[3]), false);
        assert!(tape.add(x, bad).is_err());
    }

    #[test]
    fn cross_entropy_errors() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::zeros(&[2, 3]), true);
        assert!(tape.cross_entropy(l, &[0, 3], None).is_err());
        assert!(tape.cross_entropy(l, &[0, 1], Some(&[0.0, 0.0])).is_err());
        assert!(tape.cross_entropy(l, &[0], None).is_err());
    }

    #[test]
    fn rope_rejects_odd_head_dim() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 1, 3]), false);
        assert!(matches!(tape.rope(x, &[0, 1], 10_000.0), Err(Error::Config(_))));
    }
}
