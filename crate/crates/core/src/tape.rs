//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value and whatever it needs
//! for the vector-Jacobian product. Node ids are assigned in execution order,
//! so the tape is topologically sorted by construction and `backward` is a
//! single reverse sweep.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, softmax_in_place, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a batched multi-head attention call.
///
/// Queries are `[batch * q_len, width]`, keys and values `[batch * k_len, width]`.
/// `allowed[(b * q_len + i) * k_len + j]` says whether query `i` of item `b`
/// may attend to key `j`.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub allowed: Vec<bool>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<u32>, pad: u32, probs: Vec<T>, count: usize },
    Embedding { table: Var, ids: Vec<u32> },
    GatherRows { x: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Confined to one thread; values read off it are
/// plain [`Tensor`]s.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    checked: bool,
    masked_rows: usize,
}

/// Result of [`Tape::backward`]: one gradient per node that received any.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Iterates over `(node, gradient)` pairs in node order.
    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (Var(i), g)))
    }
}

const GELU_C: f64 = 0.044715;
// sqrt(2 / pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_K) * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), checked: false, masked_rows: 0 }
    }

    /// A tape that scans every op output for NaN/Inf.
    pub fn checked() -> Self {
        Tape { checked: true, ..Self::new() }
    }

    pub fn set_checked(&mut self, on: bool) {
        self.checked = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of attention query rows so far that had no admissible key.
    /// Those rows produce a zero context vector.
    pub fn fully_masked_rows(&self) -> usize {
        self.masked_rows
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid; earlier nodes are untouched.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Handle of the node at `index`, if it exists.
    pub fn node(&self, index: usize) -> Option<Var> {
        (index < self.nodes.len()).then_some(Var(index))
    }

    /// Attention probabilities of an [`Tape::attention`] node, laid out
    /// `[batch][head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul_bt", a)?;
        let (n, k2) = self.matrix_dims("matmul_bt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_bt", format!("[{m}x{k}] x [{n}x{k2}]ᵀ")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul_bt", value, Op::MatMulBt(a, b), &[a, b])
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.shape(bias) != [cols] {
            return Err(Error::shape("add_bias", format!("bias {:?} for width {cols}", self.shape(bias))));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        self.push("add_bias", value, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.push("scale", value, Op::Scale(x, s), &[x])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    /// Elementwise GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu);
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    /// Normalizes over the last axis, then applies `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let d = self.value(x).cols();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", format!("affine params must have shape [{d}]")));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let xs = self.value(x);
        let rows = xs.rows();
        let dt = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xs.len()];
        for r in 0..rows {
            let row = xs.row(r);
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + b[c];
            }
        }
        let value = Tensor::new(xs.shape().to_vec(), out)?;
        self.push("layer_norm", value, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias])
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        let cols = value.cols();
        for row in value.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        self.push("softmax_rows", value, Op::Softmax(x), &[x])
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`,
    /// skipping positions whose target is `pad`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], pad: u32) -> Result<Var> {
        let (n, v) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", format!("{n} rows but {} targets", targets.len())));
        }
        let lv = self.value(logits).data();
        let mut probs = lv.to_vec();
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == pad {
                continue;
            }
            if t as usize >= v {
                return Err(Error::Index { op: "cross_entropy", id: t as usize, bound: v });
            }
            let row = &mut probs[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            let logit_t = lv[r * v + t as usize];
            total += max + z.ln() - logit_t;
            for x in row.iter_mut() {
                *x /= z;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::Contract("cross_entropy over zero non-pad targets".into()));
        }
        let value = Tensor::scalar(total / T::from_usize(count).unwrap());
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), pad, probs, count };
        self.push("cross_entropy", value, op, &[logits])
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (vocab, d) = self.matrix_dims("embedding", table)?;
        if ids.is_empty() {
            return Err(Error::shape("embedding", "empty id sequence"));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::Index { op: "embedding", id, bound: vocab });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        self.push("embedding", value, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// Selects (possibly repeated) rows of a matrix.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims("gather_rows", x)?;
        if rows.is_empty() {
            return Err(Error::shape("gather_rows", "empty row selection"));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Index { op: "gather_rows", id: i, bound: r });
            }
            out.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![rows.len(), c], out)?;
        self.push("gather_rows", value, Op::GatherRows { x, rows: rows.to_vec() }, &[x])
    }

    /// Stacks matrices of equal width along the row axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, c) = self.matrix_dims("concat_rows", first)?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let (r, c2) = self.matrix_dims("concat_rows", x)?;
            if c2 != c {
                return Err(Error::shape("concat_rows", format!("width {c2} != {c}")));
            }
            out.extend_from_slice(self.value(x).data());
            rows += r;
        }
        let value = Tensor::new(vec![rows, c], out)?;
        self.push("concat_rows", value, Op::ConcatRows(xs.to_vec()), xs)
    }

    /// Inverted dropout with an explicit keep mask drawn by the caller.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl rand::Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> =
            (0..self.value(x).len()).map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep }).collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("dropout", value, Op::Dropout { x, mask }, &[x])
    }

    /// Scaled dot-product attention over `spec.heads` heads, without the
    /// input/output projections. Disallowed keys get `-inf` scores; a query
    /// with no allowed key yields a zero context row and bumps
    /// [`Tape::fully_masked_rows`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qr, width) = self.matrix_dims("attention", q)?;
        let (kr, kw) = self.matrix_dims("attention", k)?;
        let (vr, vw) = self.matrix_dims("attention", v)?;
        let AttentionSpec { heads, batch, q_len, k_len, .. } = spec;
        if heads == 0 || width % heads != 0 {
            return Err(Error::shape("attention", format!("width {width} not divisible by {heads} heads")));
        }
        if kw != width || vw != width || qr != batch * q_len || kr != batch * k_len || vr != kr {
            return Err(Error::shape(
                "attention",
                format!("q [{qr}x{width}] k [{kr}x{kw}] v [{vr}x{vw}] for batch {batch}, lens {q_len}/{k_len}"),
            ));
        }
        if spec.allowed.len() != batch * q_len * k_len {
            return Err(Error::shape("attention", "mask does not match query-len x key-len"));
        }
        let dh = width / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![T::zero(); batch * heads * q_len * k_len];
        let mut out = vec![T::zero(); qr * width];
        let mut masked = 0;
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let qrow = &qd[(b * q_len + i) * width + off..][..dh];
                    let prow = &mut probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    let allowed = &spec.allowed[(b * q_len + i) * k_len..][..k_len];
                    for j in 0..k_len {
                        prow[j] = if allowed[j] {
                            let krow = &kd[(b * k_len + j) * width + off..][..dh];
                            qrow.iter().zip(krow).map(|(&x, &y)| x * y).sum::<T>() * scale
                        } else {
                            T::neg_infinity()
                        };
                    }
                    if !softmax_in_place(prow) {
                        if h == 0 {
                            masked += 1;
                        }
                        continue;
                    }
                    let orow = &mut out[(b * q_len + i) * width + off..][..dh];
                    for (j, &p) in prow.iter().enumerate() {
                        if p == T::zero() {
                            continue;
                        }
                        let vrow = &vd[(b * k_len + j) * width + off..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        self.masked_rows += masked;
        let value = Tensor::new(vec![qr, width], out)?;
        self.push("attention", value, Op::Attention { q, k, v, spec, probs }, &[q, k, v])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// Reverse sweep from a one-element `loss`. Does not modify the tape, so
    /// repeated calls produce identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad).map(|g| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("gradient matches value shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    gemm_nt(m, n, k, g, self.value(*b).data(), slot(grads, *a, m * k));
                }
                if self.wants(*b) {
                    gemm_tn(m, k, n, self.value(*a).data(), g, slot(grads, *b, k * n));
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.wants(*a) {
                    gemm_nn(m, n, k, g, self.value(*b).data(), slot(grads, *a, m * k));
                }
                if self.wants(*b) {
                    gemm_tn(m, n, k, g, self.value(*a).data(), slot(grads, *b, n * k));
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    add_into(slot(grads, *x, self.value(*x).len()), g);
                }
                if self.wants(*bias) {
                    let cols = self.value(*bias).len();
                    let gb = slot(grads, *bias, self.value(*bias).len());
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(slot(grads, *a, self.value(*a).len()), g);
                }
                if self.wants(*b) {
                    add_into(slot(grads, *b, self.value(*b).len()), g);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    for ((o, &gi), &y) in slot(grads, *a, self.value(*a).len()).iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    for ((o, &gi), &x) in slot(grads, *b, self.value(*b).len()).iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                }
            }
            Op::Scale(x, s) => {
                for (o, &gi) in slot(grads, *x, self.value(*x).len()).iter_mut().zip(g) {
                    *o += gi * *s;
                }
            }
            Op::Sum(x) => {
                for o in slot(grads, *x, self.value(*x).len()).iter_mut() {
                    *o += g[0];
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                for ((o, &gi), &xi) in slot(grads, *x, self.value(*x).len()).iter_mut().zip(g).zip(xv) {
                    *o += gi * gelu_grad(xi);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.value(*gain).len();
                let gv = self.value(*gain).data();
                if self.wants(*gain) {
                    let gg = slot(grads, *gain, self.value(*gain).len());
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = slot(grads, *bias, self.value(*bias).len());
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                if self.wants(*x) {
                    let gx = slot(grads, *x, self.value(*x).len());
                    let dt = T::from_usize(d).unwrap();
                    let mut dh = vec![T::zero(); d];
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for c in 0..d {
                            dh[c] = gr[c] * gv[c];
                            mean_dh += dh[c];
                            mean_dh_h += dh[c] * hr[c];
                        }
                        mean_dh /= dt;
                        mean_dh_h /= dt;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for c in 0..d {
                            out[c] += rstd[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let gx = slot(grads, *x, self.value(*x).len());
                for ((yr, gr), out) in y.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        out[c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, pad, probs, count } => {
                let v = self.shape(*logits)[1];
                let scale = g[0] / T::from_usize(*count).unwrap();
                let gl = slot(grads, *logits, self.value(*logits).len());
                for (r, &t) in targets.iter().enumerate() {
                    if t == *pad {
                        continue;
                    }
                    let out = &mut gl[r * v..(r + 1) * v];
                    for (c, o) in out.iter_mut().enumerate() {
                        let onehot = if c == t as usize { T::one() } else { T::zero() };
                        *o += (probs[r * v + c] - onehot) * scale;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let gt = slot(grads, *table, self.value(*table).len());
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id as usize * d..(id as usize + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::GatherRows { x, rows } => {
                let c = self.shape(*x)[1];
                let gx = slot(grads, *x, self.value(*x).len());
                for (r, &src) in rows.iter().enumerate() {
                    add_into(&mut gx[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    if self.wants(x) {
                        add_into(slot(grads, x, self.value(x).len()), &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::Dropout { x, mask } => {
                for ((o, &gi), &m) in slot(grads, *x, self.value(*x).len()).iter_mut().zip(g).zip(mask) {
                    *o += gi * m;
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.attention_backward(*q, *k, *v, spec, probs, g, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let width = self.shape(q)[1];
        let AttentionSpec { heads, batch, q_len, k_len, .. } = *spec;
        let dh = width / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut dq = vec![T::zero(); qd.len()];
        let mut dk = vec![T::zero(); kd.len()];
        let mut dv = vec![T::zero(); vd.len()];
        let mut dp = vec![T::zero(); k_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let prow = &probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    let grow = &g[(b * q_len + i) * width + off..][..dh];
                    let mut dot = T::zero();
                    for j in 0..k_len {
                        if prow[j] == T::zero() {
                            dp[j] = T::zero();
                            continue;
                        }
                        let vrow = &vd[(b * k_len + j) * width + off..][..dh];
                        dp[j] = grow.iter().zip(vrow).map(|(&x, &y)| x * y).sum();
                        dot += prow[j] * dp[j];
                        let dvrow = &mut dv[(b * k_len + j) * width + off..][..dh];
                        for (o, &x) in dvrow.iter_mut().zip(grow) {
                            *o += prow[j] * x;
                        }
                    }
                    let qrow = &qd[(b * q_len + i) * width + off..][..dh];
                    for j in 0..k_len {
                        if prow[j] == T::zero() {
                            continue;
                        }
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        let krow = &kd[(b * k_len + j) * width + off..][..dh];
                        let dqrow = &mut dq[(b * q_len + i) * width + off..][..dh];
                        for (o, &x) in dqrow.iter_mut().zip(krow) {
                            *o += ds * x;
                        }
                        let dkrow = &mut dk[(b * k_len + j) * width + off..][..dh];
                        for (o, &x) in dkrow.iter_mut().zip(qrow) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(var) {
                match &mut grads[var.0] {
                    Some(existing) => add_into(existing, &d),
                    slot @ None => *slot = Some(d),
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}
