use std::sync::Arc;

use super::gemm::gemm;
use super::{NumericsError, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddBroadcast { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    ScaleBy { s: Var, x: Var },
    Silu { a: Var },
    Softmax { a: Var, axis: usize },
    CausalSoftmax { a: Var },
    RmsNorm { x: Var, w: Var, inv_rms: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, denom: f64 },
    Reshape { a: Var },
    SwapAxes12 { a: Var },
    EmbedCorner { x: Var },
    Concat { a: Var, b: Var, axis: usize },
    Sum { a: Var },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of tensor operations supporting one reverse pass.
///
/// Nodes are pushed in execution order, so the node list is a topological
/// order by construction and `backward` walks it once in reverse.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Shape bookkeeping for a (possibly batched) matrix product.
struct MatMulLayout {
    out_shape: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
    /// For every batch index of `a`, the batch index of `b` it pairs with.
    b_index: Vec<usize>,
    /// `b` is a single matrix shared by every batch entry.
    b_shared: bool,
}

fn matmul_layout(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatMulLayout, NumericsError> {
    let err = || NumericsError::ShapeMismatch { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() };
    if a.len() < 2 || b.len() < 2 || b.len() > a.len() {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = if trans_b { (b[b.len() - 1], b[b.len() - 2]) } else { (b[b.len() - 2], b[b.len() - 1]) };
    if k != kb {
        return Err(err());
    }
    let lead_a = &a[..a.len() - 2];
    let lead_b = &b[..b.len() - 2];
    let offset = lead_a.len() - lead_b.len();
    for (i, &d) in lead_b.iter().enumerate() {
        if d != 1 && d != lead_a[offset + i] {
            return Err(err());
        }
    }
    let batch: usize = lead_a.iter().product();
    let b_batch: usize = lead_b.iter().product();
    let mut b_index = Vec::with_capacity(batch);
    for i in 0..batch {
        let mut rem = i;
        let mut idx = 0;
        let mut stride = 1;
        for ax in (0..lead_a.len()).rev() {
            let coord = rem % lead_a[ax];
            rem /= lead_a[ax];
            if ax >= offset {
                let d = lead_b[ax - offset];
                if d != 1 {
                    idx += coord * stride;
                }
                stride *= d;
            }
        }
        b_index.push(idx);
    }
    let mut out_shape = lead_a.to_vec();
    out_shape.extend([m, n]);
    Ok(MatMulLayout { out_shape, m, k, n, b_index, b_shared: b_batch == 1 })
}

fn softmax_rows(data: &mut [f64], len: usize) {
    for row in data.chunks_mut(len) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), grad_enabled: true }
    }

    /// A graph that never tracks gradients; every leaf is treated as frozen.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: &'static str, value: Tensor, requires_grad: bool, record: Op) -> Result<Var, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op });
        }
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad { record } else { Op::Leaf };
        self.nodes.push(Node { value: Arc::new(value), requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a shared leaf tensor without copying it.
    pub fn leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last `backward`, if `v` tracks gradients.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.value(v).shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch { op, lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        Ok(())
    }

    /// Matrix product over the last two axes. Leading axes of `b` broadcast
    /// against the leading axes of `a` (right-aligned, extent 1 or equal).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes, with the same batching rules as [`Graph::matmul`].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let layout = matmul_layout(self.shape(a), self.shape(b), trans_b)?;
        let MatMulLayout { ref out_shape, m, k, n, ref b_index, b_shared } = layout;
        let batch = b_index.len();
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if b_shared {
                gemm(batch * m, k, n, av, false, bv, trans_b, &mut out, false);
            } else {
                for (i, &j) in b_index.iter().enumerate() {
                    gemm(m, k, n, &av[i * m * k..], false, &bv[j * k * n..], trans_b, &mut out[i * m * n..], false);
                }
            }
        }
        let rg = self.rg(&[a, b]);
        let value = Tensor::new(out_shape.clone(), out)?;
        self.push("matmul", value, rg, Op::MatMul { a, b, trans_b })
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NumericsError> {
        self.same_shape(op, a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push("add", v, rg, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push("sub", v, rg, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push("mul", v, rg, Op::Mul { a, b })
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(NumericsError::ShapeMismatch { op: "add_broadcast", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let bl = self.value(b).len().max(1);
        let bv = self.value(b).data();
        let data = self.value(a).data().iter().enumerate().map(|(i, &x)| x + bv[i % bl]).collect();
        let v = Tensor::new(sa.to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push("add_broadcast", v, rg, Op::AddBroadcast { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, NumericsError> {
        let data = self.value(a).data().iter().map(|&x| x * factor).collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push("scale", v, rg, Op::Scale { a, factor })
    }

    /// Multiplies `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var, NumericsError> {
        if self.value(s).len() != 1 {
            return Err(NumericsError::Invalid { op: "scale_by", msg: format!("expected a scalar, got shape {:?}", self.shape(s)) });
        }
        let factor = self.value(s).data()[0];
        let data = self.value(x).data().iter().map(|&v| factor * v).collect();
        let v = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[s, x]);
        self.push("scale_by", v, rg, Op::ScaleBy { s, x })
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let data = self.value(a).data().iter().map(|&x| x * sigmoid(x)).collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push("silu", v, rg, Op::Silu { a })
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::Invalid { op: "softmax", msg: format!("axis {axis} out of range for shape {shape:?}") });
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        let mut row = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, r) in row.iter_mut().enumerate() {
                    *r = src[base + j * inner];
                }
                softmax_rows(&mut row, len);
                for (j, r) in row.iter().enumerate() {
                    data[base + j * inner] = *r;
                }
            }
        }
        let v = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        self.push("softmax", v, rg, Op::Softmax { a, axis })
    }

    /// Softmax over the last axis of `[.., Tq, Tk]` scores where query `i`
    /// sees keys `0..=i + (Tk - Tq)`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || shape[shape.len() - 1] < shape[shape.len() - 2] {
            return Err(NumericsError::Invalid { op: "causal_softmax", msg: format!("need [.., Tq, Tk] with Tk >= Tq, got {shape:?}") });
        }
        let tk = shape[shape.len() - 1];
        let tq = shape[shape.len() - 2];
        let offset = tk - tq;
        let mut data = self.value(a).data().to_vec();
        for (r, row) in data.chunks_mut(tk).enumerate() {
            let visible = (r % tq) + offset + 1;
            softmax_rows(&mut row[..visible], visible);
            row[visible..].iter_mut().for_each(|v| *v = 0.0);
        }
        let v = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        self.push("causal_softmax", v, rg, Op::CausalSoftmax { a })
    }

    /// Root-mean-square normalization over the last axis, scaled by `w`.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var, NumericsError> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(w) != [d] {
            return Err(NumericsError::ShapeMismatch { op: "rms_norm", lhs: self.shape(x).to_vec(), rhs: self.shape(w).to_vec() });
        }
        let wv = self.value(w).data();
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(xv.len());
        let mut inv_rms = Vec::with_capacity(xv.len() / d.max(1));
        for row in xv.chunks(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            data.extend(row.iter().zip(wv).map(|(&xi, &wi)| xi * r * wi));
        }
        let v = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, w]);
        self.push("rms_norm", v, rg, Op::RmsNorm { x, w, inv_rms })
    }

    /// Gathers rows of a `[rows, width]` table; output is `[ids.len(), width]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(NumericsError::Invalid { op: "embedding", msg: format!("table must be 2-D, got {shape:?}") });
        }
        let (rows, width) = (shape[0], shape[1]);
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::Invalid { op: "embedding", msg: format!("id {id} out of range for {rows} rows") });
            }
            data.extend_from_slice(&tv[id * width..(id + 1) * width]);
        }
        let v = Tensor::new(vec![ids.len(), width], data)?;
        let rg = self.rg(&[table]);
        self.push("embedding", v, rg, Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Weighted mean token cross-entropy. `logits` is `[.., V]` with one
    /// target and one weight per row; weights are 0/1 loss-mask entries.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var, NumericsError> {
        let shape = self.shape(logits).to_vec();
        let vocab = *shape.last().unwrap_or(&0);
        let rows = self.value(logits).len().checked_div(vocab).unwrap_or(0);
        if targets.len() != rows || weights.len() != rows {
            return Err(NumericsError::Invalid {
                op: "cross_entropy",
                msg: format!("{rows} logit rows but {} targets and {} mask entries", targets.len(), weights.len()),
            });
        }
        let denom: f64 = weights.iter().sum();
        if denom <= 0.0 {
            return Err(NumericsError::Invalid { op: "cross_entropy", msg: "mask selects no positions".into() });
        }
        let lv = self.value(logits).data();
        let mut total = 0.0;
        for (r, row) in lv.chunks(vocab).enumerate() {
            if weights[r] == 0.0 {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(NumericsError::Invalid { op: "cross_entropy", msg: format!("target {t} out of range for vocab {vocab}") });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += weights[r] * (lse - row[t]);
        }
        let v = Tensor::scalar(total / denom);
        let rg = self.rg(&[logits]);
        self.push("cross_entropy", v, rg, Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), denom })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let v = (*self.nodes[a.0].value).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push("reshape", v, rg, Op::Reshape { a })
    }

    /// `[d0, d1, d2, d3] -> [d0, d2, d1, d3]`; splits and merges attention heads.
    pub fn swap_axes_12(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(NumericsError::Invalid { op: "swap_axes_12", msg: format!("expected rank 4, got {s:?}") });
        }
        let data = swap12(self.value(a).data(), &s);
        let v = Tensor::new(vec![s[0], s[2], s[1], s[3]], data)?;
        let rg = self.rg(&[a]);
        self.push("swap_axes_12", v, rg, Op::SwapAxes12 { a })
    }

    /// Broadcasts the constant `base` (`[H, T, S]`) over the batch of `x`
    /// (`[B, h, t, s]`, `h ≤ H`, `t ≤ T`, `s ≤ S`) and overwrites the
    /// `[0:h, 0:t, 0:s]` corner of every batch entry with `x`.
    pub fn embed_corner(&mut self, base: &Tensor, x: Var) -> Result<Var, NumericsError> {
        let bs = base.shape();
        let xs = self.shape(x).to_vec();
        if bs.len() != 3 || xs.len() != 4 || xs[1] > bs[0] || xs[2] > bs[1] || xs[3] > bs[2] {
            return Err(NumericsError::ShapeMismatch { op: "embed_corner", lhs: bs.to_vec(), rhs: xs });
        }
        let (hh, tt, ss) = (bs[0], bs[1], bs[2]);
        let (b, h, t, s) = (xs[0], xs[1], xs[2], xs[3]);
        let per = hh * tt * ss;
        let mut data = Vec::with_capacity(b * per);
        for _ in 0..b {
            data.extend_from_slice(base.data());
        }
        let xv = self.value(x).data();
        for bi in 0..b {
            for hi in 0..h {
                for ti in 0..t {
                    let dst = bi * per + (hi * tt + ti) * ss;
                    let src = ((bi * h + hi) * t + ti) * s;
                    data[dst..dst + s].copy_from_slice(&xv[src..src + s]);
                }
            }
        }
        let v = Tensor::new(vec![b, hh, tt, ss], data)?;
        let rg = self.rg(&[x]);
        self.push("embed_corner", v, rg, Op::EmbedCorner { x })
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var, NumericsError> {
        let v = Tensor::concat(self.value(a), self.value(b), axis)?;
        let rg = self.rg(&[a, b]);
        self.push("concat", v, rg, Op::Concat { a, b, axis })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push("sum", v, rg, Op::Sum { a })
    }

    /// Reverse pass from a single-element `loss`. Gradients land on every
    /// node that tracks them; frozen leaves never receive one.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let rg = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let layout =
                    matmul_layout(nodes[a.0].value.shape(), nodes[b.0].value.shape(), trans_b).expect("layout validated in forward");
                let MatMulLayout { m, k, n, ref b_index, b_shared, .. } = layout;
                let batch = b_index.len();
                if rg(a) {
                    let bv = val(b);
                    acc(a, &mut |da| {
                        if b_shared {
                            gemm(batch * m, n, k, g, false, bv, !trans_b, da, true);
                        } else {
                            for (bi, &j) in b_index.iter().enumerate() {
                                gemm(m, n, k, &g[bi * m * n..], false, &bv[j * k * n..], !trans_b, &mut da[bi * m * k..], true);
                            }
                        }
                    });
                }
                if rg(b) {
                    let av = val(a);
                    acc(b, &mut |db| {
                        if b_shared {
                            if trans_b {
                                gemm(n, batch * m, k, g, true, av, false, db, true);
                            } else {
                                gemm(k, batch * m, n, av, true, g, false, db, true);
                            }
                        } else {
                            for (bi, &j) in b_index.iter().enumerate() {
                                let (ga, aa) = (&g[bi * m * n..], &av[bi * m * k..]);
                                if trans_b {
                                    gemm(n, m, k, ga, true, aa, false, &mut db[j * k * n..], true);
                                } else {
                                    gemm(k, m, n, aa, true, ga, false, &mut db[j * k * n..], true);
                                }
                            }
                        }
                    });
                }
            }
            &Op::Add { a, b } => {
                acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            &Op::Sub { a, b } => {
                acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            &Op::AddBroadcast { a, b } => {
                acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |d| {
                    let l = d.len().max(1);
                    for chunk in g.chunks(l) {
                        d.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                });
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |d| {
                    for ((x, gy), bb) in d.iter_mut().zip(g).zip(bv) {
                        *x += gy * bb;
                    }
                });
                acc(b, &mut |d| {
                    for ((x, gy), aa) in d.iter_mut().zip(g).zip(av) {
                        *x += gy * aa;
                    }
                });
            }
            &Op::Scale { a, factor } => acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += factor * y)),
            &Op::ScaleBy { s, x } => {
                let xv = val(x);
                let sv = val(s)[0];
                acc(s, &mut |d| d[0] += g.iter().zip(xv).map(|(gy, xx)| gy * xx).sum::<f64>());
                acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(dx, gy)| *dx += sv * gy));
            }
            &Op::Silu { a } => {
                let av = val(a);
                acc(a, &mut |d| {
                    for ((dx, gy), &x) in d.iter_mut().zip(g).zip(av) {
                        let s = sigmoid(x);
                        *dx += gy * (s + x * s * (1.0 - s));
                    }
                });
            }
            &Op::Softmax { a, axis } => {
                let shape = nodes[i].value.shape();
                let len = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                acc(a, &mut |d| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let dot: f64 = (0..len).map(|j| g[base + j * inner] * out[base + j * inner]).sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                d[p] += out[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            &Op::CausalSoftmax { a } => {
                let len = *nodes[i].value.shape().last().unwrap();
                acc(a, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(len).zip(g.chunks(len)).zip(out.chunks(len)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for ((dx, gy), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dx += y * (gy - dot);
                        }
                    }
                });
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (x, w) = (*x, *w);
                let (xv, wv) = (val(x), val(w));
                let dim = wv.len();
                acc(x, &mut |d| {
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        let row = r * dim..(r + 1) * dim;
                        let (xr, gr) = (&xv[row.clone()], &g[row.clone()]);
                        let dot: f64 = (0..dim).map(|j| gr[j] * wv[j] * xr[j]).sum();
                        let coeff = ir * ir * ir * dot / dim as f64;
                        for (j, dx) in d[row].iter_mut().enumerate() {
                            *dx += ir * wv[j] * gr[j] - xr[j] * coeff;
                        }
                    }
                });
                acc(w, &mut |d| {
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        for j in 0..dim {
                            d[j] += g[r * dim + j] * xv[r * dim + j] * ir;
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let width = nodes[table.0].value.shape()[1];
                acc(*table, &mut |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..width {
                            d[id * width + j] += g[r * width + j];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, weights, denom } => {
                let lv = val(*logits);
                let vocab = *nodes[logits.0].value.shape().last().unwrap();
                acc(*logits, &mut |d| {
                    for (r, row) in lv.chunks(vocab).enumerate() {
                        if weights[r] == 0.0 {
                            continue;
                        }
                        let scale = g[0] * weights[r] / denom;
                        let mut p = row.to_vec();
                        softmax_rows(&mut p, vocab);
                        p[targets[r]] -= 1.0;
                        for (dx, pj) in d[r * vocab..(r + 1) * vocab].iter_mut().zip(&p) {
                            *dx += scale * pj;
                        }
                    }
                });
            }
            &Op::Reshape { a } => acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            &Op::SwapAxes12 { a } => {
                let back = swap12(g, nodes[i].value.shape());
                acc(a, &mut |d| d.iter_mut().zip(&back).for_each(|(x, y)| *x += y));
            }
            &Op::EmbedCorner { x } => {
                let os = nodes[i].value.shape();
                let xs = nodes[x.0].value.shape();
                let (hh, tt, ss) = (os[1], os[2], os[3]);
                let (b, h, t, s) = (xs[0], xs[1], xs[2], xs[3]);
                acc(x, &mut |d| {
                    for bi in 0..b {
                        for hi in 0..h {
                            for ti in 0..t {
                                let src = ((bi * hh + hi) * tt + ti) * ss;
                                let dst = ((bi * h + hi) * t + ti) * s;
                                for j in 0..s {
                                    d[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                });
            }
            &Op::Concat { a, b, axis } => {
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                let outer: usize = sa[..axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                let (la, lb) = (sa[axis] * inner, sb[axis] * inner);
                acc(a, &mut |d| {
                    for o in 0..outer {
                        for j in 0..la {
                            d[o * la + j] += g[o * (la + lb) + j];
                        }
                    }
                });
                acc(b, &mut |d| {
                    for o in 0..outer {
                        for j in 0..lb {
                            d[o * lb + j] += g[o * (la + lb) + la + j];
                        }
                    }
                });
            }
            &Op::Sum { a } => acc(a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
        }
    }
}

fn swap12(src: &[f64], s: &[usize]) -> Vec<f64> {
    let (d0, d1, d2, d3) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![0.0; src.len()];
    for a in 0..d0 {
        for b in 0..d1 {
            for c in 0..d2 {
                let from = ((a * d1 + b) * d2 + c) * d3;
                let to = ((a * d2 + c) * d1 + b) * d3;
                out[to..to + d3].copy_from_slice(&src[from..from + d3]);
            }
        }
    }
    out
}
