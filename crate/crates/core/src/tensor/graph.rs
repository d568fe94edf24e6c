use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Key-padding and causality layout for [`Graph::attention`].
///
/// Queries and keys are stored as `batch` contiguous blocks of `q_len` and
/// `k_len` rows respectively.
#[derive(Clone, Debug)]
pub struct AttentionMask {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// `batch * k_len` flags; `false` keys receive zero attention.
    pub key_valid: Vec<bool>,
    /// Query `i` may only attend keys `j <= i`.
    pub causal: bool,
}

impl AttentionMask {
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.key_valid[b * self.k_len + j] && (!self.causal || j <= i)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddRow { a: Var, bias: Var },
    Relu { a: Var },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, pad: usize, probs: Vec<f64>, count: usize },
    Sum { a: Var },
    GatherRows { table: Var, ids: Vec<usize> },
    Take { a: Var, idx: Vec<usize> },
    MulRows { a: Var, s: Var },
    IndexAddRows { base: Var, src: Var, rows: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    Reshape { a: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, mask: AttentionMask, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A define-by-run gradient tape.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `c (+)= op(a) * op(b)` for row-major operands, where `op` optionally
/// transposes. `a` is `m x k` after `op`, `b` is `k x n` after `op`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above against the strides passed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        None => *dst = Some(delta),
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
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

    /// Adds a leaf. It participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Shape {
                op,
                left: t.shape().to_vec(),
                right: vec![],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul", t, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(op, self.value(a), self.value(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("add", t, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("mul", t, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("scale", t, Op::Scale { a, c }, &[a])
    }

    /// Adds a bias vector to every row (last axis).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = self.value(a).last_dim();
        if self.value(bias).numel() != cols {
            return Err(shape_err("add_row", self.value(a), self.value(bias)));
        }
        let bv = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bv).map(|(x, b)| x + b))
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("add_row", t, Op::AddRow { a, bias }, &[a, bias])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("relu", t, Op::Relu { a }, &[a])
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push("softmax", t, Op::Softmax { a, outer, len, inner }, &[a])
    }

    /// Normalises each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let cols = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.value(p).numel() != cols {
                return Err(shape_err("layer_norm", self.value(x), self.value(p)));
            }
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / cols;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            &[x, gain, bias],
        )
    }

    /// Mean negative log-likelihood over rows whose target is not `pad`.
    ///
    /// With no non-pad rows the loss is zero and so is every gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var> {
        let (rows, vocab) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: vec![rows, vocab],
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                size: vocab,
            });
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &x[r * vocab..(r + 1) * vocab];
            let top = (0..vocab).fold(0, |best, c| if row[c] > row[best] { c } else { best });
            let max = row[top];
            // the max term contributes exactly 1; keep the rest separate for ln_1p
            let rest: f64 = (0..vocab).filter(|&c| c != top).map(|c| (row[c] - max).exp()).sum();
            let z = 1.0 + rest;
            for c in 0..vocab {
                probs[r * vocab + c] = (row[c] - max).exp() / z;
            }
            if t != pad {
                total += rest.ln_1p() + (max - row[t]);
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let targets = targets.to_vec();
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets, pad, probs, count },
            &[logits],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    /// Row lookup into a 2-D table (embedding).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix_dims(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::Shape {
                op: "gather_rows",
                left: vec![n, d],
                right: vec![0],
            });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::Index {
                    what: "table rows",
                    index: id,
                    size: n,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        self.push("gather_rows", t, Op::GatherRows { table, ids: ids.to_vec() }, &[table])
    }

    /// Picks flat elements of `a` into a new tensor of `shape`.
    pub fn take(&mut self, a: Var, idx: &[usize], shape: Vec<usize>) -> Result<Var> {
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= src.len() {
                return Err(Error::Index {
                    what: "tensor elements",
                    index: i,
                    size: src.len(),
                });
            }
            out.push(src[i]);
        }
        let t = Tensor::new(shape, out)?;
        self.push("take", t, Op::Take { a, idx: idx.to_vec() }, &[a])
    }

    /// Multiplies row `r` of `a` by the scalar `s[r]`; `s` has one value per row.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (rows, cols) = (self.value(a).rows(), self.value(a).last_dim());
        if self.value(s).numel() != rows {
            return Err(shape_err("mul_rows", self.value(a), self.value(s)));
        }
        let sv = self.value(s).data();
        let data = self
            .value(a)
            .data()
            .chunks(cols)
            .zip(sv)
            .flat_map(|(row, &k)| row.iter().map(move |x| x * k))
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("mul_rows", t, Op::MulRows { a, s }, &[a, s])
    }

    /// Returns `base` with row `i` of `src` added onto row `rows[i]`.
    pub fn index_add_rows(&mut self, base: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix_dims(base, "index_add_rows")?;
        let (m, d2) = self.matrix_dims(src, "index_add_rows")?;
        if d != d2 || m != rows.len() {
            return Err(shape_err("index_add_rows", self.value(base), self.value(src)));
        }
        let mut out = self.value(base).data().to_vec();
        let s = self.value(src).data();
        for (i, &r) in rows.iter().enumerate() {
            if r >= n {
                return Err(Error::Index {
                    what: "rows",
                    index: r,
                    size: n,
                });
            }
            for c in 0..d {
                out[r * d + c] += s[i * d + c];
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        self.push(
            "index_add_rows",
            t,
            Op::IndexAddRows { base, src, rows: rows.to_vec() },
            &[base, src],
        )
    }

    /// Stacks 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Shape {
            op: "concat_rows",
            left: vec![],
            right: vec![],
        })?;
        let (_, d) = self.matrix_dims(first, "concat_rows")?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_rows")?;
            if c != d {
                return Err(shape_err("concat_rows", self.value(first), self.value(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, d], out)?;
        self.push("concat_rows", t, Op::ConcatRows { parts: parts.to_vec() }, parts)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone();
        let mut t = t.reshape(shape)?;
        t.zero_grad();
        self.push("reshape", t, Op::Reshape { a }, &[a])
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q` is `[batch * q_len, d]`, `k` and `v` are `[batch * k_len, d]`;
    /// head `h` uses columns `h * d / heads .. (h + 1) * d / heads`. Every
    /// query must have at least one allowed key.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttentionMask) -> Result<Var> {
        let (qr, d) = self.matrix_dims(q, "attention")?;
        let (kr, dk) = self.matrix_dims(k, "attention")?;
        self.same_shape(k, v, "attention")?;
        if d != dk || heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", self.value(q), self.value(k)));
        }
        if qr != mask.batch * mask.q_len || kr != mask.batch * mask.k_len || mask.key_valid.len() != kr {
            return Err(Error::Shape {
                op: "attention mask",
                left: vec![qr, kr],
                right: vec![mask.batch, mask.q_len, mask.k_len],
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let (lq, lk) = (mask.q_len, mask.k_len);
        let mut probs = vec![0.0; mask.batch * heads * lq * lk];
        let mut out = vec![0.0; qr * d];
        let mut scores = vec![0.0; lk];
        for b in 0..mask.batch {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..lq {
                    let qrow = &qv[(b * lq + i) * d + col..(b * lq + i) * d + col + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..lk {
                        if mask.allowed(b, i, j) {
                            let krow = &kv[(b * lk + j) * d + col..(b * lk + j) * d + col + dh];
                            let s = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        return Err(Error::Config(format!(
                            "attention query {i} of sequence {b} has no visible keys"
                        )));
                    }
                    let p = &mut probs[((b * heads + h) * lq + i) * lk..((b * heads + h) * lq + i + 1) * lk];
                    let mut z = 0.0;
                    for j in 0..lk {
                        if mask.allowed(b, i, j) {
                            p[j] = (scores[j] - max).exp();
                            z += p[j];
                        }
                    }
                    let orow = &mut out[(b * lq + i) * d + col..(b * lq + i) * d + col + dh];
                    for j in 0..lk {
                        if p[j] != 0.0 {
                            p[j] /= z;
                            let vrow = &vv[(b * lk + j) * d + col..(b * lk + j) * d + col + dh];
                            orow.iter_mut().zip(vrow).for_each(|(o, x)| *o += p[j] * x);
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![qr, d], out)?;
        self.push(
            "attention",
            t,
            Op::Attention { q, k, v, heads, mask: mask.clone(), probs },
            &[q, k, v],
        )
    }

    /// Reverse sweep from a scalar `loss`, adding into leaf gradients.
    ///
    /// Leaf gradients are never reset here; call [`Graph::zero_grads`] (or
    /// build a fresh graph) to start over.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.backprop_node(i, g, &mut grads);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => unreachable!(),
            &Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, &g, false, self.value(b).data(), true, &mut da, false);
                    add_into(&mut grads[a.0], da);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(a).data(), true, &g, false, &mut db, false);
                    add_into(&mut grads[b.0], db);
                }
            }
            &Op::Add { a, b } => {
                if self.wants(b) {
                    add_into(&mut grads[b.0], g.clone());
                }
                if self.wants(a) {
                    add_into(&mut grads[a.0], g);
                }
            }
            &Op::Mul { a, b } => {
                if self.wants(a) {
                    let da = g.iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[a.0], da);
                }
                if self.wants(b) {
                    let db = g.iter().zip(self.value(a).data()).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[b.0], db);
                }
            }
            &Op::Scale { a, c } => {
                add_into(&mut grads[a.0], g.iter().map(|x| x * c).collect());
            }
            &Op::AddRow { a, bias } => {
                if self.wants(bias) {
                    let cols = self.value(bias).numel();
                    let mut db = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                    }
                    add_into(&mut grads[bias.0], db);
                }
                if self.wants(a) {
                    add_into(&mut grads[a.0], g);
                }
            }
            &Op::Relu { a } => {
                let da = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                add_into(&mut grads[a.0], da);
            }
            &Op::Softmax { a, outer, len, inner } => {
                let y = node.value.data();
                let mut da = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + ii;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            da[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                add_into(&mut grads[a.0], da);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let cols = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![0.0; cols];
                    let mut db = vec![0.0; cols];
                    for (row, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            dg[c] += row[c] * hrow[c];
                            db[c] += row[c];
                        }
                    }
                    if self.wants(*gain) {
                        add_into(&mut grads[gain.0], dg);
                    }
                    if self.wants(*bias) {
                        add_into(&mut grads[bias.0], db);
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let n = cols as f64;
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let (grow, hrow) = (&g[span.clone()], &xhat[span.clone()]);
                        let dh: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..cols {
                            dx[r * cols + c] = rs * (dh[c] - mean_dh - hrow[c] * mean_dh_h);
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                }
            }
            Op::CrossEntropy { logits, targets, pad, probs, count } => {
                let mut dl = vec![0.0; probs.len()];
                if *count > 0 {
                    let vocab = probs.len() / targets.len();
                    let w = g[0] / *count as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad {
                            continue;
                        }
                        for c in 0..vocab {
                            dl[r * vocab + c] = w * probs[r * vocab + c];
                        }
                        dl[r * vocab + t] -= w;
                    }
                }
                add_into(&mut grads[logits.0], dl);
            }
            &Op::Sum { a } => {
                add_into(&mut grads[a.0], vec![g[0]; self.value(a).numel()]);
            }
            Op::GatherRows { table, ids } => {
                let d = self.value(*table).last_dim();
                let mut dt = vec![0.0; self.value(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += g[r * d + c];
                    }
                }
                add_into(&mut grads[table.0], dt);
            }
            Op::Take { a, idx } => {
                let mut da = vec![0.0; self.value(*a).numel()];
                for (gv, &j) in g.iter().zip(idx) {
                    da[j] += gv;
                }
                add_into(&mut grads[a.0], da);
            }
            &Op::MulRows { a, s } => {
                let cols = self.value(a).last_dim();
                if self.wants(a) {
                    let sv = self.value(s).data();
                    let da = g
                        .chunks(cols)
                        .zip(sv)
                        .flat_map(|(row, &k)| row.iter().map(move |x| x * k))
                        .collect();
                    add_into(&mut grads[a.0], da);
                }
                if self.wants(s) {
                    let ds = g
                        .chunks(cols)
                        .zip(self.value(a).data().chunks(cols))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    add_into(&mut grads[s.0], ds);
                }
            }
            Op::IndexAddRows { base, src, rows } => {
                let d = self.value(*base).last_dim();
                if self.wants(*src) {
                    let mut ds = Vec::with_capacity(rows.len() * d);
                    for &r in rows {
                        ds.extend_from_slice(&g[r * d..(r + 1) * d]);
                    }
                    add_into(&mut grads[src.0], ds);
                }
                if self.wants(*base) {
                    add_into(&mut grads[base.0], g);
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.wants(p) {
                        add_into(&mut grads[p.0], g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            &Op::Reshape { a } => add_into(&mut grads[a.0], g),
            Op::Attention { q, k, v, heads, mask, probs } => {
                let d = self.value(*q).last_dim();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let (lq, lk) = (mask.q_len, mask.k_len);
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let mut dp = vec![0.0; lk];
                for b in 0..mask.batch {
                    for h in 0..*heads {
                        let col = h * dh;
                        for i in 0..lq {
                            let p = &probs[((b * heads + h) * lq + i) * lk..((b * heads + h) * lq + i + 1) * lk];
                            let qo = (b * lq + i) * d + col;
                            let grow = &g[qo..qo + dh];
                            let mut dot = 0.0;
                            for j in 0..lk {
                                if p[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let ko = (b * lk + j) * d + col;
                                let vrow = &vv[ko..ko + dh];
                                dp[j] = grow.iter().zip(vrow).map(|(x, y)| x * y).sum();
                                dot += p[j] * dp[j];
                                for c in 0..dh {
                                    dv[ko + c] += p[j] * grow[c];
                                }
                            }
                            for j in 0..lk {
                                if p[j] == 0.0 {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - dot) * scale;
                                let ko = (b * lk + j) * d + col;
                                for c in 0..dh {
                                    dq[qo + c] += ds * kv[ko + c];
                                    dk[ko + c] += ds * qv[qo + c];
                                }
                            }
                        }
                    }
                }
                if self.wants(*q) {
                    add_into(&mut grads[q.0], dq);
                }
                if self.wants(*k) {
                    add_into(&mut grads[k.0], dk);
                }
                if self.wants(*v) {
                    add_into(&mut grads[v.0], dv);
                }
            }
        }
    }
}
