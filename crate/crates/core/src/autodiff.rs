//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is built fresh for every forward pass. Each primitive appends a
//! node holding its output value and enough information to run its
//! vector–Jacobian product; node indices are therefore a topological order and
//! [`Tape::backward`] simply walks them in reverse.
//!
//! All operands are treated as matrices (`rows × cols`, see
//! [`Tensor::dims2`]). Every primitive checks its output for NaN/Inf and fails
//! with [`Error::Numeric`] naming the op, so non-finite values never reach a
//! later op silently.

use crate::error::{contract_err, numeric_err, shape_err, Result};
use crate::tensor::{dot, matmul_nn, matmul_nt, matmul_tn, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRowVector(Var, Var),
    MulRowVector(Var, Var),
    Gelu(Var),
    Tanh(Var),
    L2NormalizeRows { x: Var, eps: f64 },
    SoftmaxRows(Var),
    Attention(AttentionSaved),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, index: Vec<usize> },
    GroupMeanRows { x: Var, group: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    heads: usize,
    tq: usize,
    tk: usize,
    /// Softmax probabilities, laid out `[batch][head][tq][tk]`.
    probs: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Dynamically built computation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_same(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.dims2() != b.dims2() || a.numel() != b.numel() {
        return Err(shape_err!("{op}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
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
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(numeric_err!("non-finite output from {name}"));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf; gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs, "leaf")
    }

    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(shape_err!("matmul {m}x{k} by {k2}x{n}"));
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.ng(&[a, b]);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), needs, "matmul")
    }

    /// `a · bᵀ`, the natural form for `x · Wᵀ` with `W: d_out × d_in`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(shape_err!("matmul_nt {m}x{k} by ({n}x{k2})^T"));
        }
        let out = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.ng(&[a, b]);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMulNT(a, b), needs, "matmul_nt")
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        check_same(self.value(a), self.value(b), name)?;
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        let needs = self.ng(&[a, b]);
        self.push(out, op, needs, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        let needs = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), needs, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        let needs = self.ng(&[a]);
        self.push(out, Op::AddScalar(a), needs, "add_scalar")
    }

    fn row_vector_len(&self, v: Var, cols: usize, name: &str) -> Result<()> {
        if self.value(v).numel() != cols {
            return Err(shape_err!(
                "{name}: vector of {} entries for {cols} columns",
                self.value(v).numel()
            ));
        }
        Ok(())
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row_vector(&mut self, x: Var, v: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        self.row_vector_len(v, c, "add_row_vector")?;
        let vv = self.value(v).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..r {
            for (o, &b) in out[i * c..(i + 1) * c].iter_mut().zip(vv) {
                *o += b;
            }
        }
        let out = Tensor::new(self.value(x).shape(), out)?;
        let needs = self.ng(&[x, v]);
        self.push(out, Op::AddRowVector(x, v), needs, "add_row_vector")
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row_vector(&mut self, x: Var, v: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        self.row_vector_len(v, c, "mul_row_vector")?;
        let vv = self.value(v).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..r {
            for (o, &s) in out[i * c..(i + 1) * c].iter_mut().zip(vv) {
                *o *= s;
            }
        }
        let out = Tensor::new(self.value(x).shape(), out)?;
        let needs = self.ng(&[x, v]);
        self.push(out, Op::MulRowVector(x, v), needs, "mul_row_vector")
    }

    /// `x · wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        match b {
            Some(b) => self.add_row_vector(y, b),
            None => Ok(y),
        }
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| {
            let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        let needs = self.ng(&[a]);
        self.push(out, Op::Gelu(a), needs, "gelu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        let needs = self.ng(&[a]);
        self.push(out, Op::Tanh(a), needs, "tanh")
    }

    /// `y = x / sqrt(‖x‖² + eps)` per row. With `eps == 0` a zero row is a
    /// contract error rather than a silent division by zero.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        let xs = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let n2 = dot(row, row) + eps;
            if n2 <= 0.0 {
                return Err(contract_err!("l2_normalize_rows: row {i} is the zero vector"));
            }
            let inv = 1.0 / n2.sqrt();
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v * inv;
            }
        }
        let out = Tensor::new(self.value(x).shape(), out)?;
        let needs = self.ng(&[x]);
        self.push(out, Op::L2NormalizeRows { x, eps }, needs, "l2_normalize_rows")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        let xs = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_into(&xs[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(self.value(x).shape(), out)?;
        let needs = self.ng(&[x]);
        self.push(out, Op::SoftmaxRows(x), needs, "softmax_rows")
    }

    /// Batched multi-head scaled dot-product attention.
    ///
    /// `q` is `(batch·tq) × d`, `k` and `v` are `(batch·tk) × d`; rows of one
    /// batch element are contiguous and only attend within that element.
    /// `mask[i * tk + j] == false` blocks query `i` from key `j`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (rq, d) = self.value(q).dims2();
        let (rk, dk) = self.value(k).dims2();
        let (rv, dv) = self.value(v).dims2();
        if batch == 0 || heads == 0 || d != dk || d != dv || rk != rv || rq % batch != 0 || rk % batch != 0 || d % heads != 0 {
            return Err(shape_err!(
                "attention: q {rq}x{d}, k {rk}x{dk}, v {rv}x{dv}, batch {batch}, heads {heads}"
            ));
        }
        let tq = rq / batch;
        let tk = rk / batch;
        if let Some(m) = mask {
            if m.len() != tq * tk {
                return Err(shape_err!("attention mask has {} entries, need {tq}x{tk}", m.len()));
            }
            for i in 0..tq {
                if !m[i * tk..(i + 1) * tk].iter().any(|&x| x) {
                    return Err(contract_err!("attention mask row {i} blocks every key"));
                }
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qs = self.value(q).data();
        let ks = self.value(k).data();
        let vs = self.value(v).data();
        let mut probs = vec![0.0; batch * heads * tq * tk];
        let mut out = vec![0.0; rq * d];
        let mut logits = vec![0.0; tk];
        for b in 0..batch {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..tq {
                    let qrow = &qs[(b * tq + i) * d + c0..(b * tq + i) * d + c0 + dh];
                    for j in 0..tk {
                        let allowed = mask.map_or(true, |m| m[i * tk + j]);
                        logits[j] = if allowed {
                            let krow = &ks[(b * tk + j) * d + c0..(b * tk + j) * d + c0 + dh];
                            dot(qrow, krow) * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    let p0 = ((b * heads + h) * tq + i) * tk;
                    softmax_into(&logits, &mut probs[p0..p0 + tk]);
                    let orow = &mut out[(b * tq + i) * d + c0..(b * tq + i) * d + c0 + dh];
                    for j in 0..tk {
                        let p = probs[p0 + j];
                        if p == 0.0 {
                            continue;
                        }
                        let vrow = &vs[(b * tk + j) * d + c0..(b * tk + j) * d + c0 + dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[rq, d], out)?;
        let needs = self.ng(&[q, k, v]);
        let saved = AttentionSaved {
            q,
            k,
            v,
            batch,
            heads,
            tq,
            tk,
            probs,
        };
        self.push(out, Op::Attention(saved), needs, "attention")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(shape_err!("concat_rows of nothing"));
        };
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, cc) = self.value(*p).dims2();
            if cc != c {
                return Err(shape_err!("concat_rows: {cc} columns vs {c}"));
            }
            rows += r;
            data.extend_from_slice(self.value(*p).data());
        }
        let needs = self.ng(parts);
        self.push(Tensor::new(&[rows, c], data)?, Op::ConcatRows(parts.to_vec()), needs, "concat_rows")
    }

    /// `out[i] = x[index[i]]`; rows may repeat (backward scatter-adds).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if index.is_empty() {
            return Err(shape_err!("gather_rows with empty index"));
        }
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(shape_err!("gather_rows index {i} out of {r} rows"));
            }
            data.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        let needs = self.ng(&[x]);
        let op = Op::GatherRows {
            x,
            index: index.to_vec(),
        };
        self.push(Tensor::new(&[index.len(), c], data)?, op, needs, "gather_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let index: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &index)
    }

    /// Averages consecutive groups of `group` rows: `(n·group) × c → n × c`.
    pub fn group_mean_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if group == 0 || r % group != 0 {
            return Err(shape_err!("group_mean_rows: {r} rows in groups of {group}"));
        }
        let n = r / group;
        let xs = self.value(x).data();
        let mut data = vec![0.0; n * c];
        for g in 0..n {
            let o = &mut data[g * c..(g + 1) * c];
            for i in 0..group {
                for (ov, &xv) in o.iter_mut().zip(&xs[(g * group + i) * c..(g * group + i + 1) * c]) {
                    *ov += xv;
                }
            }
            o.iter_mut().for_each(|v| *v /= group as f64);
        }
        let needs = self.ng(&[x]);
        self.push(Tensor::new(&[n, c], data)?, Op::GroupMeanRows { x, group }, needs, "group_mean_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let needs = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), needs, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.sum() / t.numel() as f64;
        let needs = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), needs, "mean")
    }

    /// Mean of squared entries of `a - b`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.value(logits).dims2();
        if targets.len() != r {
            return Err(shape_err!("cross_entropy: {} targets for {r} rows", targets.len()));
        }
        let xs = self.value(logits).data();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(contract_err!("cross_entropy: target {t} outside {c} classes"));
            }
            let row = &xs[i * c..(i + 1) * c];
            total += log_sum_exp(row) - row[t];
        }
        let needs = self.ng(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
        };
        self.push(Tensor::scalar(total / r as f64), op, needs, "cross_entropy")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().with_requires_grad(false).reshape(shape)?;
        let needs = self.ng(&[x]);
        self.push(t, Op::Reshape(x), needs, "reshape")
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (&node.op, g) {
                    (Op::Leaf, Some(g)) if node.needs_grad => {
                        Some(Tensor::new(node.value.shape(), g).expect("gradient shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce() -> Vec<f64>) {
        if self.nodes[v.0].needs_grad {
            let g = f();
            self.acc(grads, v, g);
        }
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).cols();
                self.acc_with(grads, *a, || matmul_nt(g, val(*b).data(), m, n, k));
                self.acc_with(grads, *b, || matmul_tn(val(*a).data(), g, m, k, n));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).rows();
                self.acc_with(grads, *a, || matmul_nn(g, val(*b).data(), m, n, k));
                self.acc_with(grads, *b, || matmul_tn(g, val(*a).data(), m, n, k));
            }
            Op::Add(a, b) => {
                self.acc_with(grads, *a, || g.to_vec());
                self.acc_with(grads, *b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, || g.to_vec());
                self.acc_with(grads, *b, || g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                self.acc_with(grads, *a, || g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect());
                self.acc_with(grads, *b, || g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, s) => self.acc_with(grads, *a, || g.iter().map(|x| x * s).collect()),
            Op::AddScalar(a) => self.acc_with(grads, *a, || g.to_vec()),
            Op::AddRowVector(x, v) => {
                self.acc_with(grads, *x, || g.to_vec());
                let c = val(*x).cols();
                self.acc_with(grads, *v, || column_sums(g, c));
            }
            Op::MulRowVector(x, v) => {
                let c = val(*x).cols();
                let vv = val(*v).data();
                self.acc_with(grads, *x, || {
                    g.iter().enumerate().map(|(i, gi)| gi * vv[i % c]).collect()
                });
                self.acc_with(grads, *v, || {
                    let xs = val(*x).data();
                    let prod: Vec<f64> = g.iter().zip(xs).map(|(a, b)| a * b).collect();
                    column_sums(&prod, c)
                });
            }
            Op::Gelu(a) => self.acc_with(grads, *a, || {
                g.iter()
                    .zip(val(*a).data())
                    .map(|(gi, &x)| {
                        let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        gi * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect()
            }),
            Op::Tanh(a) => self.acc_with(grads, *a, || {
                g.iter().zip(node.value.data()).map(|(gi, y)| gi * (1.0 - y * y)).collect()
            }),
            Op::L2NormalizeRows { x, eps } => self.acc_with(grads, *x, || {
                let (r, c) = val(*x).dims2();
                let xs = val(*x).data();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let row = &xs[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let n2 = dot(row, row) + eps;
                    let n = n2.sqrt();
                    let xg = dot(row, gr);
                    for j in 0..c {
                        out[i * c + j] = gr[j] / n - row[j] * xg / (n2 * n);
                    }
                }
                out
            }),
            Op::SoftmaxRows(x) => self.acc_with(grads, *x, || {
                let (r, c) = node.value.dims2();
                let ys = node.value.data();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let y = &ys[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let s = dot(y, gr);
                    for j in 0..c {
                        out[i * c + j] = y[j] * (gr[j] - s);
                    }
                }
                out
            }),
            Op::Attention(s) => self.attention_backward(s, g, grads),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).numel();
                    self.acc_with(grads, *p, || g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::GatherRows { x, index } => self.acc_with(grads, *x, || {
                let (r, c) = val(*x).dims2();
                let mut out = vec![0.0; r * c];
                for (o, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        out[i * c + j] += g[o * c + j];
                    }
                }
                out
            }),
            Op::GroupMeanRows { x, group } => self.acc_with(grads, *x, || {
                let (r, c) = val(*x).dims2();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let gi = i / group;
                    for j in 0..c {
                        out[i * c + j] = g[gi * c + j] / *group as f64;
                    }
                }
                out
            }),
            Op::Sum(x) => self.acc_with(grads, *x, || vec![g[0]; val(*x).numel()]),
            Op::Mean(x) => {
                let n = val(*x).numel();
                self.acc_with(grads, *x, || vec![g[0] / n as f64; n]);
            }
            Op::CrossEntropy { logits, targets } => self.acc_with(grads, *logits, || {
                let (r, c) = val(*logits).dims2();
                let xs = val(*logits).data();
                let mut out = vec![0.0; r * c];
                for (i, &t) in targets.iter().enumerate() {
                    softmax_into(&xs[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
                    out[i * c + t] -= 1.0;
                    for j in 0..c {
                        out[i * c + j] *= g[0] / r as f64;
                    }
                }
                out
            }),
            Op::Reshape(x) => self.acc_with(grads, *x, || g.to_vec()),
        }
        Ok(())
    }

    fn attention_backward(&self, s: &AttentionSaved, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let d = self.value(s.q).cols();
        let dh = d / s.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qs = self.value(s.q).data();
        let ks = self.value(s.k).data();
        let vs = self.value(s.v).data();
        let (tq, tk) = (s.tq, s.tk);
        let mut dq = vec![0.0; qs.len()];
        let mut dk = vec![0.0; ks.len()];
        let mut dv = vec![0.0; vs.len()];
        let mut dp = vec![0.0; tk];
        for b in 0..s.batch {
            for h in 0..s.heads {
                let c0 = h * dh;
                for i in 0..tq {
                    let p0 = ((b * s.heads + h) * tq + i) * tk;
                    let probs = &s.probs[p0..p0 + tk];
                    let go = &g[(b * tq + i) * d + c0..(b * tq + i) * d + c0 + dh];
                    let mut sum_pdp = 0.0;
                    for j in 0..tk {
                        let vrow = &vs[(b * tk + j) * d + c0..(b * tk + j) * d + c0 + dh];
                        dp[j] = dot(go, vrow);
                        sum_pdp += probs[j] * dp[j];
                        if probs[j] != 0.0 {
                            let dvrow = &mut dv[(b * tk + j) * d + c0..(b * tk + j) * d + c0 + dh];
                            for (o, &gv) in dvrow.iter_mut().zip(go) {
                                *o += probs[j] * gv;
                            }
                        }
                    }
                    let qoff = (b * tq + i) * d + c0;
                    for j in 0..tk {
                        let ds = probs[j] * (dp[j] - sum_pdp) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let koff = (b * tk + j) * d + c0;
                        for t in 0..dh {
                            dq[qoff + t] += ds * ks[koff + t];
                            dk[koff + t] += ds * qs[qoff + t];
                        }
                    }
                }
            }
        }
        self.acc(grads, s.q, dq);
        self.acc(grads, s.k, dk);
        self.acc(grads, s.v, dv);
    }
}

fn column_sums(g: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for row in g.chunks(c) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    out
}

/// Numerically stable `log Σ exp(x)`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if v == f64::NEG_INFINITY { 0.0 } else { (v - m).exp() };
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// Softmax of a single logit vector.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    softmax_into(x, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0)).unwrap();
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0)).unwrap();
        let c = t.constant(Tensor::scalar(5.0)).unwrap();
        let zero = t.scale(x, 0.0).unwrap();
        let y = t.add(zero, c).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.0);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_is_reported() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(f64::MAX)).unwrap();
        assert!(matches!(t.scale(x, 10.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn zero_row_normalization_is_contract_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(matches!(t.l2_normalize_rows(x, 0.0), Err(Error::Contract(_))));
        assert!(t.l2_normalize_rows(x, 1e-8).is_ok());
    }

    #[test]
    fn fully_masked_row_rejected() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::zeros(&[2, 2])).unwrap();
        let mask = [true, true, false, false];
        assert!(t.attention(q, q, q, 1, 1, Some(&mask)).is_err());
    }

    #[test]
    fn masked_keys_get_no_weight() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        let v = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![30.0, 40.0]]).unwrap()).unwrap();
        let mask = [true, false, true, true];
        let o = t.attention(q, q, v, 1, 1, Some(&mask)).unwrap();
        assert_eq!(t.value(o).row(0), &[1.0, 2.0]);
    }

    #[test]
    fn unused_leaf_has_no_gradient_entry() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(1.0)).unwrap();
        let y = t.param(Tensor::scalar(2.0)).unwrap();
        let z = t.mul(x, x).unwrap();
        let g = t.backward(z).unwrap();
        assert!(g.get(x).is_some());
        assert!(g.get(y).is_none());
    }
}
