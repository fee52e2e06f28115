//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation is evaluated eagerly when it is recorded; the graph keeps
//! the forward values and whatever each op needs for its backward rule.
//! [`Graph::backward`] walks the tape once in reverse order, so each node is
//! visited exactly once and inputs unreachable from the seed get exactly
//! zero gradient.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::kernels::{self, gemm};
use crate::tensor::{Mask, Tensor};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    MulSuffix(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Expand(Var),
    Sum(Var),
    MeanAxis(Var, usize),
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(f64, f64)> },
    Softmax(Var),
    Dropout { x: Var, scale: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or a zero tensor of its shape when no path reaches it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn suffix_of(outer: &[usize], inner: &[usize]) -> bool {
    inner.len() <= outer.len() && outer[outer.len() - inner.len()..] == *inner
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
    let n = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Input whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Input treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())?;
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    fn suffix_op(&mut self, name: &'static str, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !suffix_of(ta.shape(), tb.shape()) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let k = tb.numel().max(1);
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(k) {
            for (x, &y) in chunk.iter_mut().zip(tb.data()) {
                if mul {
                    *x *= y;
                } else {
                    *x += y;
                }
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let op = if mul { Op::MulSuffix(a, b) } else { Op::AddSuffix(a, b) };
        self.push(name, out, op, &[a, b])
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias, positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_op("add_broadcast", a, b, false)
    }

    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_op("mul_broadcast", a, b, true)
    }

    /// `[..., K] × [K, N] → [..., N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let k = ta.shape().last().copied().unwrap_or(0);
        if ta.rank() < 1 || tb.rank() != 2 || tb.shape()[0] != k {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let n = tb.shape()[1];
        let m = if k == 0 { 0 } else { ta.numel() / k };
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, ta.data(), (k, 1), tb.data(), (n, 1), 0.0, &mut out, n);
        let out = Tensor::new(shape, out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `[B, M, K] × [B, K, N] → [B, M, N]`; with `trans_b`, `b` is `[B, N, K]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let mismatch = || TensorError::ShapeMismatch {
            op: "batch_matmul",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(mismatch());
        }
        let (bsz, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if kb != k {
            return Err(mismatch());
        }
        let mut out = vec![0.0; bsz * m * n];
        let bstride = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..bsz {
            gemm(
                m,
                k,
                n,
                1.0,
                &ta.data()[i * m * k..(i + 1) * m * k],
                (k, 1),
                &tb.data()[i * k * n..(i + 1) * k * n],
                bstride,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
                n,
            );
        }
        let out = Tensor::new(vec![bsz, m, n], out)?;
        self.push("batch_matmul", out, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidShape {
                op: "permute",
                reason: format!("{perm:?} is not a permutation of {rank} axes"),
            });
        }
        let shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
        let mut out = vec![0.0; t.numel()];
        kernels::permute_into(t.data(), t.shape(), perm, &mut out, false);
        let out = Tensor::new(shape, out)?;
        self.push("permute", out, Op::Permute(a, perm.to_vec()), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Usage("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                reason: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::new(shape, out)?;
        self.push("concat", out, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() || start + len > t.shape()[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                reason: format!("{start}..{} along axis {axis} of {:?}", start + len, t.shape()),
            });
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let dim = t.shape()[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, out)?;
        self.push("slice", out, Op::Slice { x: a, axis, start }, &[a])
    }

    /// Tiles `a` along a new leading axis of size `n`.
    pub fn expand(&mut self, a: Var, n: usize) -> Result<Var> {
        let t = self.value(a);
        let mut shape = vec![n];
        shape.extend_from_slice(t.shape());
        let out = Tensor::new(shape, t.data().repeat(n))?;
        self.push("expand", out, Op::Expand(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() || t.shape()[axis] == 0 {
            return Err(TensorError::InvalidShape {
                op: "mean_axis",
                reason: format!("cannot average axis {axis} of {:?}", t.shape()),
            });
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let dim = t.shape()[axis];
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &t.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / dim as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, out)?;
        self.push("mean_axis", out, Op::MeanAxis(a, axis), &[a])
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())?;
        self.push(name, out, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map("gelu", a, Op::Gelu(a), kernels::gelu)
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.shape().last().copied().unwrap_or(0);
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: t.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(t.numel());
        let mut stats = Vec::with_capacity(t.numel() / d.max(1));
        for row in t.data().chunks(d.max(1)) {
            let (mean, rstd) = kernels::row_stats(row, eps);
            stats.push((mean, rstd));
            out.extend(row.iter().zip(g).zip(b).map(|((&v, &gi), &bi)| (v - mean) * rstd * gi + bi));
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push("layer_norm", out, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta])
    }

    /// Softmax over the last axis. `mask` (true = silence) must have a shape that is a
    /// trailing suffix of the input's, and is broadcast over the leading axes.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let t = self.value(x);
        let d = t.shape().last().copied().unwrap_or(0).max(1);
        if let Some(m) = mask {
            if m.shape().is_empty() || !suffix_of(t.shape(), m.shape()) {
                return Err(TensorError::ShapeMismatch {
                    op: "masked_softmax",
                    lhs: t.shape().to_vec(),
                    rhs: m.shape().to_vec(),
                });
            }
        }
        let mut out = vec![0.0; t.numel()];
        let period = mask.map(|m| m.bits().len()).unwrap_or(1).max(1);
        for (r, (row, o)) in t.data().chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let bits = mask.map(|m| {
                let off = (r * d) % period;
                &m.bits()[off..off + d]
            });
            kernels::softmax_row(row, bits, o);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push("masked_softmax", out, Op::Softmax(x), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Inverted dropout. Identity (same handle) when `rate == 0` or not training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Usage(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let scale: Vec<f64> = (0..t.numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().zip(&scale).map(|(v, s)| v * s).collect())?;
        self.push("dropout", out, Op::Dropout { x, scale }, &[x])
    }

    /// Mean over rows of −log softmax(logits)[label]. `logits` is `[N, K]` or `[K]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let k = t.shape().last().copied().unwrap_or(0);
        let n = if k == 0 { 0 } else { t.numel() / k };
        if n != labels.len() || n == 0 {
            return Err(TensorError::Usage(format!(
                "cross_entropy: {} labels for logits of shape {:?}",
                labels.len(),
                t.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Usage(format!("cross_entropy: label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; t.numel()];
        let mut loss = 0.0;
        for ((row, p), &label) in t.data().chunks(k).zip(probs.chunks_mut(k)).zip(labels) {
            kernels::softmax_row(row, None, p);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        let out = Tensor::scalar(loss / n as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("cross_entropy", out, op, &[logits])
    }

    /// Reverse pass from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(output.0)
            .ok_or_else(|| TensorError::Usage(format!("backward from unknown node {}", output.0)))?;
        if node.value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward seed must be scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        if node.requires_grad {
            grads[output.0] = Some(vec![1.0]);
        }
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut out: Vec<Option<Tensor>> = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("gradient shape")))
            .collect();
        out.resize(self.nodes.len(), None);
        Ok(Gradients { grads: out, shapes })
    }

    #[allow(clippy::needless_range_loop)]
    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(&self.nodes, grads, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                }
                if needs(*b) {
                    acc!(*b).iter_mut().zip(g).for_each(|(d, &gi)| *d += sign * gi);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    acc!(*a).iter_mut().zip(g).zip(vb).for_each(|((d, &gi), &y)| *d += gi * y);
                }
                if needs(*b) {
                    acc!(*b).iter_mut().zip(g).zip(va).for_each(|((d, &gi), &x)| *d += gi * x);
                }
            }
            Op::AddSuffix(a, b) | Op::MulSuffix(a, b) => {
                let mul = matches!(node.op, Op::MulSuffix(..));
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let k = vb.len().max(1);
                if needs(*a) {
                    let da = acc!(*a);
                    for (chunk, gc) in da.chunks_mut(k).zip(g.chunks(k)) {
                        for ((d, &gi), &y) in chunk.iter_mut().zip(gc).zip(vb) {
                            *d += if mul { gi * y } else { gi };
                        }
                    }
                }
                if needs(*b) {
                    let db = acc!(*b);
                    for (gc, xc) in g.chunks(k).zip(va.chunks(k)) {
                        for ((d, &gi), &x) in db.iter_mut().zip(gc).zip(xc) {
                            *d += if mul { gi * x } else { gi };
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(d, &gi)| *d += c * gi);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = tb.shape()[0];
                let n = tb.shape()[1];
                let m = if k == 0 { 0 } else { ta.numel() / k };
                if needs(*a) {
                    // dA = dY · Bᵀ
                    gemm(m, n, k, 1.0, g, (n, 1), tb.data(), (1, n), 1.0, acc!(*a), k);
                }
                if needs(*b) {
                    // dB = Aᵀ · dY
                    gemm(k, m, n, 1.0, ta.data(), (1, k), g, (n, 1), 1.0, acc!(*b), n);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bsz, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = node.value.shape()[2];
                for bi in 0..bsz {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let av = &ta.data()[bi * m * k..(bi + 1) * m * k];
                    let bv = &tb.data()[bi * k * n..(bi + 1) * k * n];
                    if needs(*a) {
                        // dA = dY · Bᵀ, where B is k×n (or stored n×k when transposed)
                        let bt = if *trans_b { (k, 1) } else { (1, n) };
                        let da = &mut acc!(*a)[bi * m * k..(bi + 1) * m * k];
                        gemm(m, n, k, 1.0, gs, (n, 1), bv, bt, 1.0, da, k);
                    }
                    if needs(*b) {
                        let db = &mut acc!(*b)[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // d(Bᵀ) = dYᵀ · A  → n×k
                            gemm(n, m, k, 1.0, gs, (1, n), av, (k, 1), 1.0, db, k);
                        } else {
                            gemm(k, m, n, 1.0, av, (1, k), gs, (n, 1), 1.0, db, n);
                        }
                    }
                }
            }
            Op::Permute(a, perm) => {
                if needs(*a) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    kernels::permute_into(g, node.value.shape(), &inv, acc!(*a), true);
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                }
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if needs(p) {
                        let dp = acc!(p);
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            dp[o * len..(o + 1) * len].iter_mut().zip(src).for_each(|(d, &gi)| *d += gi);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if needs(*x) {
                    let in_shape = self.shape(*x);
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let dim = in_shape[*axis];
                    let len = node.value.shape()[*axis] * inner;
                    let dx = acc!(*x);
                    for o in 0..outer {
                        let base = (o * dim + start) * inner;
                        dx[base..base + len]
                            .iter_mut()
                            .zip(&g[o * len..(o + 1) * len])
                            .for_each(|(d, &gi)| *d += gi);
                    }
                }
            }
            Op::Expand(a) => {
                if needs(*a) {
                    let da = acc!(*a);
                    let k = da.len().max(1);
                    for chunk in g.chunks(k) {
                        da.iter_mut().zip(chunk).for_each(|(d, &gi)| *d += gi);
                    }
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    acc!(*a).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanAxis(a, axis) => {
                if needs(*a) {
                    let in_shape = self.shape(*a);
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let dim = in_shape[*axis];
                    let inv = 1.0 / dim as f64;
                    let da = acc!(*a);
                    for o in 0..outer {
                        let gs = &g[o * inner..(o + 1) * inner];
                        for d in 0..dim {
                            da[(o * dim + d) * inner..(o * dim + d + 1) * inner]
                                .iter_mut()
                                .zip(gs)
                                .for_each(|(x, &gi)| *x += gi * inv);
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    let x = self.value(*a).data();
                    acc!(*a)
                        .iter_mut()
                        .zip(g)
                        .zip(x)
                        .for_each(|((d, &gi), &xi)| *d += if xi > 0.0 { gi } else { 0.0 });
                }
            }
            Op::Gelu(a) => {
                if needs(*a) {
                    let x = self.value(*a).data();
                    acc!(*a)
                        .iter_mut()
                        .zip(g)
                        .zip(x)
                        .for_each(|((d, &gi), &xi)| *d += gi * kernels::gelu_grad(xi));
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let d = gv.len();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx_all = needs(*x).then(|| acc!(*x));
                for (r, (&(mean, rstd), (xr, gr))) in stats.iter().zip(xv.chunks(d).zip(g.chunks(d))).enumerate() {
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * rstd;
                        dgamma[j] += gr[j] * xhat;
                        dbeta[j] += gr[j];
                        let dxhat = gr[j] * gv[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    if let Some(dx) = dx_all.as_deref_mut() {
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * rstd;
                            let dxhat = gr[j] * gv[j];
                            dx[r * d + j] += rstd * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                        }
                    }
                }
                if needs(*gamma) {
                    acc!(*gamma).iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b);
                }
                if needs(*beta) {
                    acc!(*beta).iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b);
                }
            }
            Op::Softmax(x) => {
                if needs(*x) {
                    let y = node.value.data();
                    let d = node.value.shape().last().copied().unwrap_or(0).max(1);
                    let dx = acc!(*x);
                    for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                        kernels::softmax_row_backward(yr, gr, dr);
                    }
                }
            }
            Op::Dropout { x, scale } => {
                if needs(*x) {
                    acc!(*x)
                        .iter_mut()
                        .zip(g)
                        .zip(scale)
                        .for_each(|((d, &gi), &s)| *d += gi * s);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if needs(*logits) {
                    let k = probs.len() / labels.len();
                    let w = g[0] / labels.len() as f64;
                    let dl = acc!(*logits);
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            dl[r * k + j] += w * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let right = g.matmul(a, eye).unwrap();
        let left = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(right).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.value(left).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn add_negation_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.5, -2.0, 7.25]));
        let nx = g.neg(x).unwrap();
        let z = g.add(x, nx).unwrap();
        assert_eq!(g.value(z).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.param(Tensor::scalar(3.0));
        let f = g.mul(x, y).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.wrt(x).data(), &[3.0]);
        assert_eq!(grads.wrt(y).data(), &[2.0]);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn([2, 3], |i| i as f64));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x), Tensor::ones([2, 3]));
    }

    #[test]
    fn unrelated_input_gets_exact_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let unused = g.param(Tensor::ones([4]));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(unused), Tensor::zeros([4]));
        assert_eq!(grads.wrt(x).data(), &[4.0]);
    }

    #[test]
    fn backward_needs_scalar_seed() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones([3]));
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::Usage(_))));
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1e300));
        let err = g.mul(x, x).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "mul" });
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([3]));
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_entry_is_exactly_zero_and_rest_renormalize() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[5.0, 1.0, 2.0]));
        let mask = Mask::new([3], vec![false, true, false]).unwrap();
        let y = g.masked_softmax(x, Some(&mask)).unwrap();
        let x2 = g.constant(t(&[2], &[5.0, 2.0]));
        let y2 = g.softmax(x2).unwrap();
        let (w, r) = (g.value(y).data(), g.value(y2).data());
        assert_eq!(w[1].to_bits(), 0.0f64.to_bits());
        assert!((w[0] - r[0]).abs() < 1e-15 && (w[2] - r[1]).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], &[1.0, 2.0, 3.0, 0.5, 0.5, 0.5]));
        let mask = Mask::new([2, 3], vec![true, true, true, false, false, false]).unwrap();
        let y = g.masked_softmax(x, Some(&mask)).unwrap();
        assert_eq!(&g.value(y).data()[..3], &[0.0, 0.0, 0.0]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(x).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mask_broadcasts_over_leading_axes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([4, 2, 2], |i| (i as f64 * 0.37).sin()));
        let mask = Mask::new([2, 2], vec![false, true, true, false]).unwrap();
        let y = g.masked_softmax(x, Some(&mask)).unwrap();
        for row in g.value(y).data().chunks(4) {
            assert_eq!(row, &[1.0, 0.0, 0.0, 1.0]);
        }
        let bad = Mask::none([3, 2]);
        assert!(g.masked_softmax(x, Some(&bad)).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let cases: [(&[f64], &[f64]); 3] = [
            (&[4.0, 4.0, 4.0], &[0.0, 0.0, 0.0]),
            (&[1.0, -1.0], &[1.0, -1.0]),
            (&[0.0, 2.0], &[-1.0, 1.0]),
        ];
        for (input, expected) in cases {
            let d = input.len();
            let mut g = Graph::new();
            let x = g.constant(t(&[1, d], input));
            let gamma = g.constant(Tensor::ones([d]));
            let beta = g.constant(Tensor::zeros([d]));
            let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
            for (a, b) in g.value(y).data().iter().zip(expected) {
                assert!((a - b).abs() < 1e-9, "{input:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gelu_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 10.0, 1.0]));
        let y = g.gelu(x).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-12);
        // x·Φ(x) at 1, with Φ from an independent normal CDF implementation
        // (statrs' erf is good to ~1e-11) and a 30-digit reference value.
        let phi = statrs::distribution::ContinuousCDF::cdf(&statrs::distribution::Normal::standard(), 1.0);
        assert!((v[2] - phi).abs() < 1e-10, "{} vs {}", v[2], phi);
        assert!((v[2] - 0.841_344_746_068_542_948_6).abs() < 1e-15);
        assert!((v[2] - 0.841345).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::zeros([40]));
        let l = g.cross_entropy(uniform, &[7]).unwrap();
        assert!((g.value(l).data()[0] - 40f64.ln()).abs() < 1e-12);

        let sat = g.constant(t(&[3], &[1000.0, 0.0, 0.0]));
        let l = g.cross_entropy(sat, &[0]).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-12);

        let two = g.constant(t(&[2], &[1.0, 0.0]));
        let l = g.cross_entropy(two, &[0]).unwrap();
        let direct = (1.0 + (-1f64).exp()).ln();
        assert!((g.value(l).data()[0] - direct).abs() < 1e-15);
        assert!((direct - 0.3133).abs() < 1e-4);

        assert!(matches!(g.cross_entropy(two, &[2]), Err(TensorError::Usage(_))));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones([10]));
        assert_eq!(g.dropout(x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(g.dropout(x, 0.7, &mut rng, false).unwrap(), x);
        assert!(g.dropout(x, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let n = 200_000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones([n]));
        let y = g.dropout(x, 0.5, &mut rng, true).unwrap();
        let v = g.value(y).data();
        let zeros = v.iter().filter(|&&e| e == 0.0).count() as f64 / n as f64;
        let sigma = (0.25 / n as f64).sqrt();
        assert!((zeros - 0.5).abs() < 3.0 * sigma, "zero fraction {zeros}");
        let mean = v.iter().sum::<f64>() / n as f64;
        // survivors are scaled by 2, so the mean has twice the binomial spread
        assert!((mean - 1.0).abs() < 3.0 * 2.0 * sigma, "mean {mean}");
    }

    #[test]
    fn dropout_is_deterministic_for_a_seed() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_fn([64], |i| i as f64));
            let y = g.dropout(x, 0.3, &mut rng, true).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn permute_concat_slice_roundtrip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([2, 3, 4], |i| i as f64));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), g.value(x));
        let a = g.slice(x, 1, 0, 1).unwrap();
        let b = g.slice(x, 1, 1, 2).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c), g.value(x));
        assert!(g.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn batch_matmul_transposed_matches_explicit_transpose() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn([2, 3, 4], |i| (i as f64).cos()));
        let b = g.constant(Tensor::from_fn([2, 5, 4], |i| (i as f64 * 0.5).sin()));
        let bt = g.permute(b, &[0, 2, 1]).unwrap();
        let direct = g.batch_matmul(a, bt, false).unwrap();
        let fused = g.batch_matmul(a, b, true).unwrap();
        assert!(g.value(direct).max_abs_diff(g.value(fused)).unwrap() < 1e-14);
    }
}
