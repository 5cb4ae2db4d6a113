//! Reverse-mode differentiation over a linear tape.
//!
//! Ops evaluate eagerly and append a node. `backward` sweeps the tape once in
//! reverse and only propagates into nodes that (transitively) depend on a
//! parameter leaf, so frozen weights never get a gradient buffer.

use std::borrow::Cow;

use super::kernels::{gelu, gelu_grad, gemm, normalize_row, softmax_row};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Padding mask for attention scores laid out as `[batch * heads, seq, seq]`.
#[derive(Clone, Debug)]
pub struct KeyMask {
    /// `[batch * seq]`, `true` where the key position holds a real token.
    pub keep: Vec<bool>,
    pub heads: usize,
    pub seq: usize,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Scale { a: Var, c: f64 },
    Gelu { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Vec<f64>, rstd: Vec<f64> },
    Softmax { a: Var },
    SplitHeads { a: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { a: Var, batch: usize, seq: usize, heads: usize },
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    FirstToken { a: Var, seq: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Leaves may borrow tensors for the tape's lifetime.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }

    /// Number of non-leaf nodes whose backward rule ran.
    pub fn visited_ops(&self) -> usize {
        self.visited
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf that never receives a gradient.
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), false)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), false)
    }

    /// Borrowed leaf whose gradient is reported by `backward`.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), true)
    }

    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// `a · b` over the last axis of `a`; `b` must be 2-D.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a 1-D `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.shape().len() != 1 || b.len() != x.cols() {
            return Err(mismatch("add_row", x, b));
        }
        let mut out = x.clone();
        let c = b.len();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow { a, bias }, &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale { a, c }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu { a }, &[a])
    }

    /// Layer norm over the last axis with elementwise gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        for p in [gain, bias] {
            let pv = self.value(p);
            if pv.shape() != [c] {
                return Err(mismatch("layer_norm", xv, pv));
            }
        }
        let rows = xv.rows();
        let mut normed = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        for (xr, nr) in xv.data().chunks_exact(c).zip(normed.chunks_exact_mut(c)) {
            rstd.push(normalize_row(xr, nr));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = normed.clone();
        for row in out.chunks_exact_mut(c) {
            for j in 0..c {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.softmax_masked(a, None)
            .expect("unmasked softmax cannot fail")
    }

    /// Softmax over the last axis of `[batch * heads, seq, seq]` scores, with
    /// padded key positions given probability zero.
    pub fn softmax_masked(&mut self, a: Var, mask: Option<&KeyMask>) -> Result<Var> {
        let mut out = self.value(a).clone();
        let c = out.cols();
        match mask {
            None => {
                for row in out.data_mut().chunks_exact_mut(c) {
                    softmax_row(row, None);
                }
            }
            Some(m) => {
                let shape = out.shape().to_vec();
                if shape.len() != 3 || shape[1] != m.seq || shape[2] != m.seq
                    || shape[0] * m.seq != m.keep.len() * m.heads
                {
                    return Err(Error::InvalidArgument(format!(
                        "attention mask for {} keys x {} heads does not fit scores {shape:?}",
                        m.keep.len(),
                        m.heads
                    )));
                }
                for (g, block) in out.data_mut().chunks_exact_mut(m.seq * m.seq).enumerate() {
                    let b = g / m.heads;
                    let keep = &m.keep[b * m.seq..(b + 1) * m.seq];
                    if !keep.iter().any(|&k| k) {
                        return Err(Error::InvalidArgument(
                            "attention row with every key masked".into(),
                        ));
                    }
                    for row in block.chunks_exact_mut(m.seq) {
                        softmax_row(row, Some(keep));
                    }
                }
            }
        }
        Ok(self.push(out, Op::Softmax { a }, &[a]))
    }

    /// `[batch * seq, heads * dh]` to `[batch * heads, seq, dh]`.
    pub fn split_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let x = self.value(a);
        let d = x.cols();
        if x.rows() != batch * seq || !d.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "split_heads: {:?} is not [{batch}*{seq}, k*{heads}]",
                x.shape()
            )));
        }
        let dh = d / heads;
        let mut out = vec![0.0; x.len()];
        let src = x.data();
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let from = (b * seq + s) * d + h * dh;
                    let to = ((b * heads + h) * seq + s) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let out = Tensor::from_parts(vec![batch * heads, seq, dh], out);
        Ok(self.push(out, Op::SplitHeads { a, batch, seq, heads }, &[a]))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 3 || x.shape()[0] != batch * heads || x.shape()[1] != seq {
            return Err(Error::InvalidArgument(format!(
                "merge_heads: {:?} is not [{batch}*{heads}, {seq}, dh]",
                x.shape()
            )));
        }
        let dh = x.shape()[2];
        let d = dh * heads;
        let mut out = vec![0.0; x.len()];
        let src = x.data();
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let to = (b * seq + s) * d + h * dh;
                    let from = ((b * heads + h) * seq + s) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let out = Tensor::from_parts(vec![batch * seq, d], out);
        Ok(self.push(out, Op::MergeHeads { a, batch, seq, heads }, &[a]))
    }

    /// Per-group product of `[g, m, k]` and `[g, k, n]` (or `[g, n, k]` when
    /// `transpose_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (xs, ys) = (x.shape(), y.shape());
        if xs.len() != 3 || ys.len() != 3 || xs[0] != ys[0] {
            return Err(mismatch("batch_matmul", x, y));
        }
        let (g, m, k) = (xs[0], xs[1], xs[2]);
        let (n, k2) = if transpose_b { (ys[1], ys[2]) } else { (ys[2], ys[1]) };
        if k != k2 {
            return Err(mismatch("batch_matmul", x, y));
        }
        let b_strides = if transpose_b { (1, k) } else { (n, 1) };
        let mut out = vec![0.0; g * m * n];
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &x.data()[i * m * k..(i + 1) * m * k],
                (k, 1),
                &y.data()[i * k * n..(i + 1) * k * n],
                b_strides,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let out = Tensor::from_parts(vec![g, m, n], out);
        Ok(self.push(out, Op::BatchMatMul { a, b, transpose_b }, &[a, b]))
    }

    /// Picks row `0` of each length-`seq` block: `[batch * seq, d]` to `[batch, d]`.
    pub fn first_token(&mut self, a: Var, seq: usize) -> Result<Var> {
        let x = self.value(a);
        if seq == 0 || !x.rows().is_multiple_of(seq) {
            return Err(Error::InvalidArgument(format!(
                "first_token: {} rows not divisible by seq {seq}",
                x.rows()
            )));
        }
        let batch = x.rows() / seq;
        let d = x.cols();
        let mut out = Vec::with_capacity(batch * d);
        for b in 0..batch {
            out.extend_from_slice(x.row(b * seq));
        }
        let out = Tensor::from_parts(vec![batch, d], out);
        Ok(self.push(out, Op::FirstToken { a, seq }, &[a]))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits; returns a `[1]` scalar.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let c = x.cols();
        if x.shape().len() != 2 || x.rows() != labels.len() || labels.iter().any(|&l| l >= c) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: logits {:?} vs {} labels",
                x.shape(),
                labels.len()
            )));
        }
        let mut probs = x.data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_exact_mut(c).zip(labels) {
            softmax_row(row, None);
            loss -= row[label].max(f64::MIN_POSITIVE).ln();
        }
        loss /= labels.len() as f64;
        let out = Tensor::from_vec(vec![loss]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Backward sweep from a scalar root with seed gradient 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let v = self.value(root);
        if v.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be a scalar, got {:?}",
                v.shape()
            )));
        }
        self.backward_with(root, Tensor::filled(v.shape(), 1.0))
    }

    /// Backward sweep with an explicit seed gradient for `root`.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        self.value(root).check_same_shape("backward seed", &seed)?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        let mut visited = 0;
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited += 1;
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (x, w) = (self.value(*a), self.value(*b));
                let (m, k, n) = (x.rows(), x.cols(), w.shape()[1]);
                if self.wants(*a) {
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n, 1), w.data(), (1, n), &mut dx, false);
                    accumulate(grads, *a, x.shape(), dx);
                }
                if self.wants(*b) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, m, n, x.data(), (1, k), g.data(), (n, 1), &mut dw, false);
                    accumulate(grads, *b, w.shape(), dw);
                }
            }
            Op::Add { a, b } => {
                for p in [*a, *b] {
                    if self.wants(p) {
                        accumulate(grads, p, g.shape(), g.data().to_vec());
                    }
                }
            }
            Op::AddRow { a, bias } => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.shape(), g.data().to_vec());
                }
                if self.wants(*bias) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks_exact(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *bias, &[c], db);
                }
            }
            Op::Scale { a, c } => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.shape(), g.data().iter().map(|v| v * c).collect());
                }
            }
            Op::Gelu { a } => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    let dx = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, xv)| gv * gelu_grad(*xv))
                        .collect();
                    accumulate(grads, *a, x.shape(), dx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let c = g.cols();
                let gamma = self.value(*gain).data();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dgain = vec![0.0; c];
                    let mut dbias = vec![0.0; c];
                    for (gr, nr) in g.data().chunks_exact(c).zip(normed.chunks_exact(c)) {
                        for j in 0..c {
                            dgain[j] += gr[j] * nr[j];
                            dbias[j] += gr[j];
                        }
                    }
                    if self.wants(*gain) {
                        accumulate(grads, *gain, &[c], dgain);
                    }
                    if self.wants(*bias) {
                        accumulate(grads, *bias, &[c], dbias);
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let inv_c = 1.0 / c as f64;
                    for (((gr, nr), dr), rs) in g
                        .data()
                        .chunks_exact(c)
                        .zip(normed.chunks_exact(c))
                        .zip(dx.chunks_exact_mut(c))
                        .zip(rstd)
                    {
                        let mut mean_gh = 0.0;
                        let mut mean_ghn = 0.0;
                        for j in 0..c {
                            let gh = gr[j] * gamma[j];
                            mean_gh += gh;
                            mean_ghn += gh * nr[j];
                        }
                        mean_gh *= inv_c;
                        mean_ghn *= inv_c;
                        for j in 0..c {
                            dr[j] = rs * (gr[j] * gamma[j] - mean_gh - nr[j] * mean_ghn);
                        }
                    }
                    accumulate(grads, *x, g.shape(), dx);
                }
            }
            Op::Softmax { a } => {
                if self.wants(*a) {
                    let c = g.cols();
                    let mut dx = vec![0.0; g.len()];
                    for ((gr, pr), dr) in g
                        .data()
                        .chunks_exact(c)
                        .zip(out.data().chunks_exact(c))
                        .zip(dx.chunks_exact_mut(c))
                    {
                        let dot: f64 = gr.iter().zip(pr).map(|(x, y)| x * y).sum();
                        for j in 0..c {
                            dr[j] = pr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(grads, *a, g.shape(), dx);
                }
            }
            Op::SplitHeads {
                a,
                batch,
                seq,
                heads,
            } => {
                if self.wants(*a) {
                    let dh = g.cols();
                    let d = dh * heads;
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..*batch {
                        for s in 0..*seq {
                            for h in 0..*heads {
                                let to = (b * seq + s) * d + h * dh;
                                let from = ((b * heads + h) * seq + s) * dh;
                                dx[to..to + dh].copy_from_slice(&g.data()[from..from + dh]);
                            }
                        }
                    }
                    accumulate(grads, *a, &[batch * seq, d], dx);
                }
            }
            Op::MergeHeads {
                a,
                batch,
                seq,
                heads,
            } => {
                if self.wants(*a) {
                    let d = g.cols();
                    let dh = d / heads;
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..*batch {
                        for s in 0..*seq {
                            for h in 0..*heads {
                                let from = (b * seq + s) * d + h * dh;
                                let to = ((b * heads + h) * seq + s) * dh;
                                dx[to..to + dh].copy_from_slice(&g.data()[from..from + dh]);
                            }
                        }
                    }
                    accumulate(grads, *a, &[batch * heads, *seq, dh], dx);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (gn, m, k) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let n = g.shape()[2];
                let gd = g.data();
                if self.wants(*a) {
                    // dx = g · yᵀ, where y is [k, n] or, transposed, stored as [n, k].
                    let y_strides = if *transpose_b { (k, 1) } else { (1, n) };
                    let mut dx = vec![0.0; gn * m * k];
                    for i in 0..gn {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            (n, 1),
                            &y.data()[i * k * n..(i + 1) * k * n],
                            y_strides,
                            &mut dx[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    accumulate(grads, *a, x.shape(), dx);
                }
                if self.wants(*b) {
                    let mut dy = vec![0.0; gn * k * n];
                    for i in 0..gn {
                        let xs = &x.data()[i * m * k..(i + 1) * m * k];
                        let gs = &gd[i * m * n..(i + 1) * m * n];
                        let dst = &mut dy[i * k * n..(i + 1) * k * n];
                        if *transpose_b {
                            // dy [n, k] = gᵀ · x
                            gemm(n, m, k, gs, (1, n), xs, (k, 1), dst, false);
                        } else {
                            // dy [k, n] = xᵀ · g
                            gemm(k, m, n, xs, (1, k), gs, (n, 1), dst, false);
                        }
                    }
                    accumulate(grads, *b, y.shape(), dy);
                }
            }
            Op::FirstToken { a, seq } => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    let d = g.cols();
                    let mut dx = vec![0.0; x.len()];
                    for b in 0..g.rows() {
                        let to = b * seq * d;
                        dx[to..to + d].copy_from_slice(g.row(b));
                    }
                    accumulate(grads, *a, x.shape(), dx);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.wants(*logits) {
                    let x = self.value(*logits);
                    let c = x.cols();
                    let scale = g.data()[0] / labels.len() as f64;
                    let mut dx = probs.clone();
                    for (row, &label) in dx.chunks_exact_mut(c).zip(labels) {
                        row[label] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    accumulate(grads, *logits, x.shape(), dx);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(&data) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), data)),
    }
}
