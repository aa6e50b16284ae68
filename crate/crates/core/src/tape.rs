//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is an append-only list of nodes. Every op pushes one node whose
//! parents are earlier nodes, so the node list is already in topological
//! order and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use tern_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::matrix(1, 3, vec![1.0, -2.0, 3.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, matmul_into, matmul_nt_into, matmul_tn_acc, Tensor};

/// Handle to a node on a [`Tape`].
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
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    CrossEntropy {
        logits: Var,
        rows: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
    Ste(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf honouring the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Copies `x`'s value into a new constant; no gradient flows back.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`; with `b` laid out as `[out × in]` this is a linear layer.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMulNt(a, b), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape(), data)?
        } else if tb.is_scalar() {
            let s = tb.item();
            ta.map(|x| f(x, s))
        } else if ta.is_scalar() {
            let s = ta.item();
            tb.map(|y| f(s, y))
        } else {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    fn row_op(&mut self, x: Var, r: Var, name: &'static str, mul: bool) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(r));
        let (rows, cols) = tx.dims2();
        if tr.len() != cols {
            return Err(Error::shape(name, tx.shape(), tr.shape()));
        }
        let mut out = tx.data().to_vec();
        for i in 0..rows {
            let row = &mut out[i * cols..(i + 1) * cols];
            for (o, &b) in row.iter_mut().zip(tr.data()) {
                if mul {
                    *o *= b;
                } else {
                    *o += b;
                }
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        let rg = self.rg(&[x, r]);
        let op = if mul { Op::MulRow(x, r) } else { Op::AddRow(x, r) };
        Ok(self.push(value, op, rg))
    }

    /// Adds a `[1×c]` row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_op(x, row, "add_row", false)
    }

    /// Multiplies every row of `x` elementwise by a `[1×c]` row vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_op(x, row, "mul_row", true)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu_scalar);
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Normalizes each row (the last axis) to zero mean and unit variance.
    pub fn layernorm(&mut self, x: Var, eps: f64) -> Var {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2();
        let mut out = vec![0.0; rows * cols];
        let mut rstd = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (o, v) in out[i * cols..(i + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        let value = Tensor::new(tx.shape(), out).expect("layernorm shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::LayerNorm { x, rstd }, rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        let rg = self.rg(&[x]);
        self.push(value, Op::Abs(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let rg = self.rg(&[x]);
        self.push(value, Op::Transpose(x), rg)
    }

    /// Selects rows of `x` by index (repeats allowed). Embedding lookup is
    /// `gather_rows(table, token_ids)`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2();
        if idx.is_empty() {
            return Err(Error::contract("gather_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "row index {bad} out of range for {rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(tx.row(i));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(idx.len(), cols, out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::contract("concat_rows of nothing"));
        };
        let cols = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape("concat_rows", self.value(*first).shape(), t.shape()));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(rows, cols, out), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Mean token-level negative log-likelihood over rows where `mask` is set.
    /// Unmasked rows contribute neither loss nor gradient.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, vocab) = tl.dims2();
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::shape("softmax_cross_entropy", tl.shape(), &[targets.len(), mask.len()]));
        }
        let mut selected = Vec::new();
        for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if m {
                if t >= vocab {
                    return Err(Error::contract(format!("target {t} outside vocabulary of {vocab}")));
                }
                selected.push((i, t));
            }
        }
        if selected.is_empty() {
            return Err(Error::EmptySupervision);
        }
        let mut probs = Vec::with_capacity(selected.len() * vocab);
        let mut total = 0.0;
        for &(i, t) in &selected {
            let row = tl.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[t];
            probs.extend(row.iter().map(|v| (v - max).exp() / z));
        }
        let loss = total / selected.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                rows: selected,
                probs,
            },
            rg,
        ))
    }

    /// Forward returns `quantized`; backward hands the incoming gradient to
    /// `x` unchanged.
    pub fn ste_passthrough(&mut self, x: Var, quantized: Tensor) -> Result<Var> {
        if self.value(x).shape() != quantized.shape() {
            return Err(Error::shape("ste_passthrough", self.value(x).shape(), quantized.shape()));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(quantized.with_requires_grad(false), Op::Ste(x), rg))
    }

    /// Multi-head causal self-attention over `rows / seq_len` independent
    /// sequences stacked along the row axis. `q`, `k`, `v` are `[rows × n]`
    /// with heads split across columns.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq_len: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(Error::shape("causal_attention", tq.shape(), tk.shape()));
        }
        let (rows, n) = tq.dims2();
        if heads == 0 || n % heads != 0 || seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::contract(format!(
                "attention over {rows}x{n} with {heads} heads and sequence length {seq_len}"
            )));
        }
        let dh = n / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let batch = rows / seq_len;
        let t = seq_len;
        let mut probs = vec![0.0; batch * heads * t * t];
        let mut out = vec![0.0; rows * n];
        let mut scores = vec![0.0; t];
        for b in 0..batch {
            for h in 0..heads {
                let cs = h * dh..(h + 1) * dh;
                for i in 0..t {
                    let qi = &tq.row(b * t + i)[cs.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let s = dot(qi, &tk.row(b * t + j)[cs.clone()]) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for s in &mut scores[..=i] {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let prow = &mut probs[((b * heads + h) * t + i) * t..][..t];
                    let orow = &mut out[(b * t + i) * n..][cs.clone()];
                    for j in 0..=i {
                        let p = scores[j] / z;
                        prow[j] = p;
                        axpy(p, &tv.row(b * t + j)[cs.clone()], orow);
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::matrix(rows, n, out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            },
            rg,
        ))
    }

    /// Populates gradients of `loss` for every reachable node that requires
    /// them. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::contract("backward already called on this tape"));
        }
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;

        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }

        // Accumulates `g` (shaped like node `i`) into operand `v` of an
        // elementwise op, summing when `v` was scalar-broadcast.
        let elementwise = |grads: &mut [Option<Vec<f64>>], v: Var, f: &dyn Fn(usize) -> f64| {
            if !wants(v) {
                return;
            }
            let s = slot(grads, nodes, v);
            if s.len() == g.len() {
                for (j, sj) in s.iter_mut().enumerate() {
                    *sj += f(j);
                }
            } else {
                s[0] += (0..g.len()).map(f).sum::<f64>();
            }
        };

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).cols();
                if wants(*a) {
                    // dA = G · Bᵀ
                    let mut tmp = vec![0.0; m * k];
                    matmul_nt_into(g, val(*b).data(), &mut tmp, m, n, k);
                    add_into(slot(grads, nodes, *a), &tmp);
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    matmul_tn_acc(val(*a).data(), g, slot(grads, nodes, *b), m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).rows();
                if wants(*a) {
                    // dA = G · B
                    let mut tmp = vec![0.0; m * k];
                    matmul_into(g, val(*b).data(), &mut tmp, m, n, k);
                    add_into(slot(grads, nodes, *a), &tmp);
                }
                if wants(*b) {
                    // dB = Gᵀ · A
                    matmul_tn_acc(g, val(*a).data(), slot(grads, nodes, *b), m, n, k);
                }
            }
            Op::Add(a, b) => {
                elementwise(grads, *a, &|j| g[j]);
                elementwise(grads, *b, &|j| g[j]);
            }
            Op::Sub(a, b) => {
                elementwise(grads, *a, &|j| g[j]);
                elementwise(grads, *b, &|j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let at = |t: &Tensor, j: usize| if t.is_scalar() { t.item() } else { t.data()[j] };
                elementwise(grads, *a, &|j| g[j] * at(tb, j));
                elementwise(grads, *b, &|j| g[j] * at(ta, j));
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    axpy(*c, g, slot(grads, nodes, *x));
                }
            }
            Op::AddRow(x, r) | Op::MulRow(x, r) => {
                let is_mul = matches!(nodes[i].op, Op::MulRow(..));
                let (rows, cols) = val(*x).dims2();
                if wants(*x) {
                    let s = slot(grads, nodes, *x);
                    if is_mul {
                        let rv = val(*r).data();
                        for row in 0..rows {
                            for c in 0..cols {
                                s[row * cols + c] += g[row * cols + c] * rv[c];
                            }
                        }
                    } else {
                        add_into(s, g);
                    }
                }
                if wants(*r) {
                    let xv = val(*x).data();
                    let s = slot(grads, nodes, *r);
                    for row in 0..rows {
                        let gr = &g[row * cols..(row + 1) * cols];
                        if is_mul {
                            for c in 0..cols {
                                s[c] += gr[c] * xv[row * cols + c];
                            }
                        } else {
                            add_into(s, gr);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                elementwise(grads, *x, &|j| g[j] * gelu_grad_scalar(xv[j]));
            }
            Op::LayerNorm { x, rstd } => {
                if wants(*x) {
                    let y = &nodes[i].value;
                    let (rows, cols) = y.dims2();
                    let s = slot(grads, nodes, *x);
                    for row in 0..rows {
                        let yr = y.row(row);
                        let gr = &g[row * cols..(row + 1) * cols];
                        let mg = gr.iter().sum::<f64>() / cols as f64;
                        let mgy = dot(gr, yr) / cols as f64;
                        for c in 0..cols {
                            s[row * cols + c] += rstd[row] * (gr[c] - mg - yr[c] * mgy);
                        }
                    }
                }
            }
            Op::Abs(x) => {
                let xv = val(*x).data();
                elementwise(grads, *x, &|j| {
                    let v = xv[j];
                    if v > 0.0 {
                        g[j]
                    } else if v < 0.0 {
                        -g[j]
                    } else {
                        0.0
                    }
                });
            }
            Op::Sum(x) => {
                if wants(*x) {
                    slot(grads, nodes, *x).iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let s = slot(grads, nodes, *x);
                    let d = g[0] / s.len() as f64;
                    s.iter_mut().for_each(|v| *v += d);
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    let (r, c) = val(*x).dims2();
                    let s = slot(grads, nodes, *x);
                    for a in 0..r {
                        for b in 0..c {
                            s[a * c + b] += g[b * r + a];
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if wants(*x) {
                    let cols = val(*x).cols();
                    let s = slot(grads, nodes, *x);
                    for (o, &src) in idx.iter().enumerate() {
                        add_into(&mut s[src * cols..(src + 1) * cols], &g[o * cols..(o + 1) * cols]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if wants(p) {
                        add_into(slot(grads, nodes, p), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::CrossEntropy { logits, rows, probs } => {
                if wants(*logits) {
                    let vocab = val(*logits).cols();
                    let scale = g[0] / rows.len() as f64;
                    let s = slot(grads, nodes, *logits);
                    for (r, &(row, target)) in rows.iter().enumerate() {
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        let sr = &mut s[row * vocab..(row + 1) * vocab];
                        axpy(scale, p, sr);
                        sr[target] -= scale;
                    }
                }
            }
            Op::Ste(x) => {
                if wants(*x) {
                    add_into(slot(grads, nodes, *x), g);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            } => {
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let (rows, n) = tq.dims2();
                let (heads, t) = (*heads, *seq_len);
                let dh = n / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; rows * n];
                let mut dk = vec![0.0; rows * n];
                let mut dv = vec![0.0; rows * n];
                let mut dp = vec![0.0; t];
                for b in 0..rows / t {
                    for h in 0..heads {
                        let cs = h * dh..(h + 1) * dh;
                        for i in 0..t {
                            let go = &g[(b * t + i) * n..][cs.clone()];
                            let prow = &probs[((b * heads + h) * t + i) * t..][..t];
                            let mut pdp = 0.0;
                            for j in 0..=i {
                                dp[j] = dot(go, &tv.row(b * t + j)[cs.clone()]);
                                pdp += prow[j] * dp[j];
                                axpy(prow[j], go, &mut dv[(b * t + j) * n..][cs.clone()]);
                            }
                            let qi = &tq.row(b * t + i)[cs.clone()];
                            for j in 0..=i {
                                let ds = prow[j] * (dp[j] - pdp) * scale;
                                if ds != 0.0 {
                                    axpy(ds, &tk.row(b * t + j)[cs.clone()], &mut dq[(b * t + i) * n..][cs.clone()]);
                                    axpy(ds, qi, &mut dk[(b * t + j) * n..][cs.clone()]);
                                }
                            }
                        }
                    }
                }
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if wants(var) {
                        add_into(slot(grads, nodes, var), &d);
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
