//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Graph`] is built once per forward pass. Every op stores what its
//! backward rule needs; [`Graph::backward`] walks the list in reverse and
//! accumulates `f64` adjoints. Ops are fused at the granularity the models use
//! (attention, layer norm, losses) rather than elementwise, which keeps the
//! tape short and each backward rule checkable against finite differences.

use std::collections::HashMap;

use super::kernels::{dot, log_softmax_row, norm, softmax_in_place, EPS};
use super::scalar::Scalar;
use super::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, s: Var },
    MulConst { x: Var, c: f64 },
    Gelu { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Gather { src: Var, idx: Vec<usize> },
    CausalAttention { qkv: Var, batch: usize, seq: usize, heads: usize, probs: Vec<f64> },
    SenseContext { qk: Var, batch: usize, seq: usize, slots: usize },
    SlotContrib { c: Var, e: Var, batch: usize, seq: usize, slots: usize },
    SumSlots { u: Var, slots: usize },
    Softmax { x: Var },
    ConvexMix { alpha: Var, v: Var, slots: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, weights: Vec<f64>, smoothing: f64, probs: Vec<f64> },
    KlDistill { student: Var, teacher: Vec<f64>, student_probs: Vec<f64>, weights: Vec<f64>, tau: f64 },
    Diversity { e: Var, slots: usize, weights: Vec<f64> },
    InfoNce { a: Var, p: Var, temp: f64, row_probs: Vec<f64>, col_probs: Vec<f64> },
    SlotPool { u: Var, slots: usize, temp: f64, w: Vec<f64>, r: Vec<f64> },
    MaskedMean { x: Var, groups: Vec<Vec<usize>> },
    WeightedSum { x: Var, w: Vec<f64> },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation.
///
/// Parameters are bound by name with [`Graph::param`]; binding the same name
/// twice returns the same [`Var`]. Only parameters bound as trainable, and
/// nodes downstream of them, take part in the backward pass.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<String, Var>,
    trainable: Vec<(String, Var)>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), trainable: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf holding a copy of `t`; differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let g = t.requires_grad;
        self.push(t, Op::Leaf, g)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Binds a named parameter, copying its current value.
    pub fn param(&mut self, name: &str, t: &Tensor<S>, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let mut value = t.clone();
        value.grad = None;
        value.requires_grad = trainable;
        let v = self.push(value, Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        if trainable {
            self.trainable.push((name.to_string(), v));
        }
        v
    }

    /// Trainable parameters bound so far, in binding order.
    pub fn trainable_params(&self) -> &[(String, Var)] {
        &self.trainable
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    fn f64s(&self, v: Var) -> Vec<f64> {
        self.nodes[v.0].value.to_f64_vec()
    }

    // ---- ops -------------------------------------------------------------

    /// `a [.., k] x b [k, n]`, or `a x b^T` for `b [n, k]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if bv.rank() != 2 {
            return Err(Error::shape("matmul: right operand must be a matrix"));
        }
        let k = av.cols();
        let m = av.rows();
        let (bk, n) = if trans_b { (bv.shape()[1], bv.shape()[0]) } else { (bv.shape()[0], bv.shape()[1]) };
        if bk != k {
            return Err(Error::shape(format!("matmul: {:?} x {:?} (trans_b={trans_b})", av.shape(), bv.shape())));
        }
        let data = if trans_b {
            matmul_bt_raw(av.data(), bv.data(), m, k, n)
        } else {
            matmul_raw(av.data(), bv.data(), m, k, n)
        };
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::MatMul { a, b, trans_b }, g))
    }

    /// Adds a `[n]` bias to every row of `x [.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let n = xv.cols();
        if bv.numel() != n {
            return Err(Error::shape("add_bias: width mismatch"));
        }
        let data: Vec<S> = xv.data().iter().enumerate().map(|(i, &v)| v + bv.data()[i % n]).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let g = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddBias { x, bias }, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!("add: {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, g))
    }

    /// `s * x` for a one-element tensor `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
        if sv.numel() != 1 {
            return Err(Error::shape("scale: factor must have one element"));
        }
        let f = sv.data()[0];
        let out = xv.map(|v| f * v);
        let g = self.any_grad(&[x, s]);
        Ok(self.push(out, Op::Scale { x, s }, g))
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Var {
        let out = self.nodes[x.0].value.map(|v| S::of(v.as_f64() * c));
        let g = self.any_grad(&[x]);
        self.push(out, Op::MulConst { x, c }, g)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(|v| {
            let x = v.as_f64();
            S::of(0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
        });
        let g = self.any_grad(&[x]);
        self.push(out, Op::Gelu { x }, g)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let n = xv.cols();
        let (gv, bv) = (self.nodes[gamma.0].value.data(), self.nodes[beta.0].value.data());
        if gv.len() != n || bv.len() != n {
            return Err(Error::shape("layer_norm: affine width mismatch"));
        }
        let rows = xv.rows();
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(xv.numel());
        for r in 0..rows {
            let row: Vec<f64> = xv.row(r).iter().map(|v| v.as_f64()).collect();
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            for (i, v) in row.iter().enumerate() {
                data.push(S::of((v - mu) * rs * gv[i].as_f64() + bv[i].as_f64()));
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let g = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, mean, rstd }, g))
    }

    /// Rows `idx` of a matrix; used for embedding lookup and row selection.
    pub fn gather(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let sv = &self.nodes[src.0].value;
        let (rows, cols) = (sv.rows(), sv.cols());
        if idx.is_empty() {
            return Err(Error::Empty("gather indices"));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::OutOfRange(format!("row {i} of {rows}")));
            }
            data.extend_from_slice(sv.row(i));
        }
        let out = Tensor::new(vec![idx.len(), cols], data)?;
        let g = self.any_grad(&[src]);
        Ok(self.push(out, Op::Gather { src, idx: idx.to_vec() }, g))
    }

    /// Multi-head causal self-attention over packed `[batch*seq, 3d]` rows
    /// laid out as `q | k | v`; returns `[batch*seq, d]`.
    pub fn causal_attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let v = &self.nodes[qkv.0].value;
        if v.rows() != batch * seq || v.cols() % 3 != 0 || (v.cols() / 3) % heads != 0 {
            return Err(Error::shape(format!("attention: {:?} for batch={batch} seq={seq} heads={heads}", v.shape())));
        }
        let d = v.cols() / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = v.to_f64_vec();
        let w = 3 * d;
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![S::zero(); batch * seq * d];
        let mut row = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                for q in 0..seq {
                    let qi = (b * seq + q) * w + h * dh;
                    for (j, r) in row.iter_mut().enumerate().take(q + 1) {
                        let ki = (b * seq + j) * w + d + h * dh;
                        *r = dot(&x[qi..qi + dh], &x[ki..ki + dh]) * scale;
                    }
                    softmax_in_place(&mut row[..=q]);
                    let pbase = ((b * heads + h) * seq + q) * seq;
                    probs[pbase..pbase + q + 1].copy_from_slice(&row[..=q]);
                    let mut acc = vec![0.0; dh];
                    for (j, &p) in row.iter().enumerate().take(q + 1) {
                        let vi = (b * seq + j) * w + 2 * d + h * dh;
                        for (a, &xv) in acc.iter_mut().zip(&x[vi..vi + dh]) {
                            *a += p * xv;
                        }
                    }
                    let oi = (b * seq + q) * d + h * dh;
                    for (o, a) in out[oi..oi + dh].iter_mut().zip(acc) {
                        *o = S::of(a);
                    }
                }
            }
        }
        let t = Tensor::new(vec![batch * seq, d], out)?;
        let g = self.any_grad(&[qkv]);
        Ok(self.push(t, Op::CausalAttention { qkv, batch, seq, heads, probs }, g))
    }

    /// Per-slot causal query/key weights from packed `[batch*seq, 2d]` rows
    /// (`q | k`, slot `k` owning columns `k*d/K..(k+1)*d/K` of each half).
    ///
    /// Output is `C [batch, slots, seq, seq]` with `C[b,k,q,j] = 0` for `j > q`
    /// and each row a softmax scaled by `1/sqrt(d/K)`.
    pub fn sense_context(&mut self, qk: Var, batch: usize, seq: usize, slots: usize) -> Result<Var> {
        let v = &self.nodes[qk.0].value;
        if v.rows() != batch * seq || v.cols() % 2 != 0 || (v.cols() / 2) % slots != 0 {
            return Err(Error::shape(format!("sense_context: {:?} for slots={slots}", v.shape())));
        }
        let d = v.cols() / 2;
        let dk = d / slots;
        let scale = 1.0 / (dk as f64).sqrt();
        let x = v.to_f64_vec();
        let mut c = vec![S::zero(); batch * slots * seq * seq];
        let mut row = vec![0.0; seq];
        for b in 0..batch {
            for k in 0..slots {
                for q in 0..seq {
                    let qi = (b * seq + q) * 2 * d + k * dk;
                    for (j, r) in row.iter_mut().enumerate().take(q + 1) {
                        let ki = (b * seq + j) * 2 * d + d + k * dk;
                        *r = dot(&x[qi..qi + dk], &x[ki..ki + dk]) * scale;
                    }
                    softmax_in_place(&mut row[..=q]);
                    let base = ((b * slots + k) * seq + q) * seq;
                    for j in 0..=q {
                        c[base + j] = S::of(row[j]);
                    }
                }
            }
        }
        let t = Tensor::new(vec![batch, slots, seq, seq], c)?;
        let g = self.any_grad(&[qk]);
        Ok(self.push(t, Op::SenseContext { qk, batch, seq, slots }, g))
    }

    /// Per-slot contributions `U[b,q,k,:] = sum_{j<=q} C[b,k,q,j] E[b,j,k,:]`
    /// with `E` and `U` packed as `[batch*seq, slots*d]`.
    pub fn slot_contrib(&mut self, c: Var, e: Var, batch: usize, seq: usize, slots: usize) -> Result<Var> {
        let (cv, ev) = (&self.nodes[c.0].value, &self.nodes[e.0].value);
        if cv.shape() != [batch, slots, seq, seq] || ev.rows() != batch * seq || ev.cols() % slots != 0 {
            return Err(Error::shape(format!("slot_contrib: C {:?}, E {:?}", cv.shape(), ev.shape())));
        }
        let d = ev.cols() / slots;
        let cd = cv.to_f64_vec();
        let ed = ev.to_f64_vec();
        let mut u = vec![S::zero(); batch * seq * slots * d];
        let mut acc = vec![0.0; d];
        for b in 0..batch {
            for k in 0..slots {
                for q in 0..seq {
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    let cb = ((b * slots + k) * seq + q) * seq;
                    for j in 0..=q {
                        let w = cd[cb + j];
                        if w == 0.0 {
                            continue;
                        }
                        let ei = (b * seq + j) * slots * d + k * d;
                        for (a, &x) in acc.iter_mut().zip(&ed[ei..ei + d]) {
                            *a += w * x;
                        }
                    }
                    let ui = (b * seq + q) * slots * d + k * d;
                    for (o, &a) in u[ui..ui + d].iter_mut().zip(&acc) {
                        *o = S::of(a);
                    }
                }
            }
        }
        let t = Tensor::new(vec![batch * seq, slots * d], u)?;
        let g = self.any_grad(&[c, e]);
        Ok(self.push(t, Op::SlotContrib { c, e, batch, seq, slots }, g))
    }

    /// Sums the `slots` blocks of each row: `[n, slots*d] -> [n, d]`.
    pub fn sum_slots(&mut self, u: Var, slots: usize) -> Result<Var> {
        let v = &self.nodes[u.0].value;
        if v.cols() % slots != 0 {
            return Err(Error::shape("sum_slots: width not divisible by slots"));
        }
        let d = v.cols() / slots;
        let rows = v.rows();
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let row = v.row(r);
            for i in 0..d {
                let s: f64 = (0..slots).map(|k| row[k * d + i].as_f64()).sum();
                out.push(S::of(s));
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        let g = self.any_grad(&[u]);
        Ok(self.push(t, Op::SumSlots { u, slots }, g))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let n = v.cols();
        let mut data = Vec::with_capacity(v.numel());
        for r in 0..v.rows() {
            let mut row: Vec<f64> = v.row(r).iter().map(|x| x.as_f64()).collect();
            softmax_in_place(&mut row);
            data.extend(row.into_iter().map(S::of));
        }
        debug_assert_eq!(data.len(), v.rows() * n);
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(t, Op::Softmax { x }, g))
    }

    /// `h[n,:] = sum_k alpha[n,k] v[n,k,:]` with `v` packed as `[n, slots*d]`.
    pub fn convex_mix(&mut self, alpha: Var, v: Var, slots: usize) -> Result<Var> {
        let (av, vv) = (&self.nodes[alpha.0].value, &self.nodes[v.0].value);
        if av.cols() != slots || av.rows() != vv.rows() || vv.cols() % slots != 0 {
            return Err(Error::shape(format!("convex_mix: alpha {:?}, v {:?}", av.shape(), vv.shape())));
        }
        let d = vv.cols() / slots;
        let rows = av.rows();
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let (a, row) = (av.row(r), vv.row(r));
            for i in 0..d {
                let s: f64 = (0..slots).map(|k| a[k].as_f64() * row[k * d + i].as_f64()).sum();
                out.push(S::of(s));
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        let g = self.any_grad(&[alpha, v]);
        Ok(self.push(t, Op::ConvexMix { alpha, v, slots }, g))
    }

    fn loss_weights(mask: &[bool], rows: usize) -> Result<Vec<f64>> {
        if mask.len() != rows {
            return Err(Error::shape(format!("mask has {} entries for {rows} rows", mask.len())));
        }
        let m = mask.iter().filter(|&&b| b).count();
        if m == 0 {
            return Err(Error::Empty("token mask (M = 0)"));
        }
        Ok(mask.iter().map(|&b| if b { 1.0 / m as f64 } else { 0.0 }).collect())
    }

    /// Masked mean cross-entropy of `logits [n, V]` against `labels`, with
    /// label smoothing `eps`: `(1-eps) NLL(gold) + eps * mean_v NLL(v)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], mask: &[bool], smoothing: f64) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        let (rows, vocab) = (lv.rows(), lv.cols());
        if labels.len() != rows {
            return Err(Error::shape("cross_entropy: label count"));
        }
        let weights = Self::loss_weights(mask, rows)?;
        let mut probs = vec![0.0; rows * vocab];
        let mut loss = 0.0;
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            if labels[r] >= vocab {
                return Err(Error::OutOfRange(format!("label {} with vocab {vocab}", labels[r])));
            }
            let lp = log_softmax_row(lv.row(r), 1.0);
            let nll_gold = -lp[labels[r]];
            let nll_mean = -lp.iter().sum::<f64>() / vocab as f64;
            loss += weights[r] * ((1.0 - smoothing) * nll_gold + smoothing * nll_mean);
            for (p, l) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(&lp) {
                *p = l.exp();
            }
        }
        let g = self.any_grad(&[logits]);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), weights, smoothing, probs };
        Ok(self.push(Tensor::scalar(S::of(loss)), op, g))
    }

    /// `(1/M) sum_t m_t KL(softmax(teacher_t / tau) || softmax(student_t / tau))`.
    /// The teacher is read as a constant.
    pub fn kl_distill(&mut self, teacher: &Tensor<S>, student: Var, tau: f64, mask: &[bool]) -> Result<Var> {
        if tau <= 0.0 {
            return Err(Error::invalid("tau", "temperature must be positive"));
        }
        let sv = &self.nodes[student.0].value;
        if teacher.shape() != sv.shape() {
            return Err(Error::shape(format!("kl_distill: teacher {:?} vs student {:?}", teacher.shape(), sv.shape())));
        }
        let (rows, vocab) = (sv.rows(), sv.cols());
        let weights = Self::loss_weights(mask, rows)?;
        let mut tp = vec![0.0; rows * vocab];
        let mut sp = vec![0.0; rows * vocab];
        let mut loss = 0.0;
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            let lt = log_softmax_row(teacher.row(r), tau);
            let ls = log_softmax_row(sv.row(r), tau);
            let mut kl = 0.0;
            for i in 0..vocab {
                let p = lt[i].exp();
                if p > 0.0 {
                    kl += p * (lt[i] - ls[i]);
                }
                tp[r * vocab + i] = p;
                sp[r * vocab + i] = ls[i].exp();
            }
            loss += weights[r] * kl.max(0.0);
        }
        let g = self.any_grad(&[student]);
        let op = Op::KlDistill { student, teacher: tp, student_probs: sp, weights, tau };
        Ok(self.push(Tensor::scalar(S::of(loss)), op, g))
    }

    /// Mean squared off-diagonal cosine among each row's `slots` vectors,
    /// averaged over masked rows of `e [n, slots*d]`.
    pub fn diversity(&mut self, e: Var, slots: usize, mask: &[bool]) -> Result<Var> {
        if slots < 2 {
            return Err(Error::invalid("slots", "diversity needs at least two slots"));
        }
        let ev = &self.nodes[e.0].value;
        if ev.cols() % slots != 0 {
            return Err(Error::shape("diversity: width not divisible by slots"));
        }
        let d = ev.cols() / slots;
        let weights = Self::loss_weights(mask, ev.rows())?;
        let pairs = (slots * (slots - 1)) as f64;
        let mut loss = 0.0;
        for r in 0..ev.rows() {
            if weights[r] == 0.0 {
                continue;
            }
            let hat = normalized_blocks(ev.row(r), slots, d)?;
            let mut s = 0.0;
            for k in 0..slots {
                for l in 0..slots {
                    if k != l {
                        s += dot(&hat[k * d..(k + 1) * d], &hat[l * d..(l + 1) * d]).powi(2);
                    }
                }
            }
            loss += weights[r] * s / pairs;
        }
        let g = self.any_grad(&[e]);
        Ok(self.push(Tensor::scalar(S::of(loss)), Op::Diversity { e, slots, weights }, g))
    }

    /// Symmetric InfoNCE between matched rows of `a` and `p` under cosine
    /// similarity divided by `temp`.
    pub fn info_nce(&mut self, a: Var, p: Var, temp: f64) -> Result<Var> {
        let (av, pv) = (&self.nodes[a.0].value, &self.nodes[p.0].value);
        if av.shape() != pv.shape() || av.rank() != 2 {
            return Err(Error::shape(format!("info_nce: {:?} vs {:?}", av.shape(), pv.shape())));
        }
        if temp <= 0.0 {
            return Err(Error::invalid("temperature", "must be positive"));
        }
        let (n, d) = (av.rows(), av.cols());
        let ah = normalized_blocks(&av.data().to_vec(), n, d)?;
        let ph = normalized_blocks(&pv.data().to_vec(), n, d)?;
        let mut sim = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                sim[i * n + j] = dot(&ah[i * d..(i + 1) * d], &ph[j * d..(j + 1) * d]) / temp;
            }
        }
        let mut row_probs = sim.clone();
        let mut col_probs = vec![0.0; n * n];
        let mut loss = 0.0;
        for i in 0..n {
            let lse = softmax_in_place(&mut row_probs[i * n..(i + 1) * n]);
            loss += 0.5 * (lse - sim[i * n + i]) / n as f64;
        }
        for j in 0..n {
            let mut col: Vec<f64> = (0..n).map(|i| sim[i * n + j]).collect();
            let lse = softmax_in_place(&mut col);
            loss += 0.5 * (lse - sim[j * n + j]) / n as f64;
            for i in 0..n {
                col_probs[i * n + j] = col[i];
            }
        }
        let g = self.any_grad(&[a, p]);
        Ok(self.push(Tensor::scalar(S::of(loss.max(0.0))), Op::InfoNce { a, p, temp, row_probs, col_probs }, g))
    }

    /// Pools the slot blocks of `u [n, slots*d]` with weights
    /// `softmax_k(|u_k| / temp)`.
    pub fn slot_pool(&mut self, u: Var, slots: usize, temp: f64) -> Result<Var> {
        if temp <= 0.0 {
            return Err(Error::invalid("temperature", "must be positive"));
        }
        let v = &self.nodes[u.0].value;
        if v.cols() % slots != 0 {
            return Err(Error::shape("slot_pool: width not divisible by slots"));
        }
        let d = v.cols() / slots;
        let rows = v.rows();
        let mut w = vec![0.0; rows * slots];
        let mut r = vec![0.0; rows * slots];
        let mut out = Vec::with_capacity(rows * d);
        for i in 0..rows {
            let row: Vec<f64> = v.row(i).iter().map(|x| x.as_f64()).collect();
            for k in 0..slots {
                r[i * slots + k] = (norm(&row[k * d..(k + 1) * d]).powi(2) + EPS * EPS).sqrt();
            }
            let mut logits: Vec<f64> = r[i * slots..(i + 1) * slots].iter().map(|x| x / temp).collect();
            softmax_in_place(&mut logits);
            w[i * slots..(i + 1) * slots].copy_from_slice(&logits);
            for c in 0..d {
                let s: f64 = (0..slots).map(|k| logits[k] * row[k * d + c]).sum();
                out.push(S::of(s));
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        let g = self.any_grad(&[u]);
        Ok(self.push(t, Op::SlotPool { u, slots, temp, w, r }, g))
    }

    /// Mean of the listed rows of `x`, one output row per group.
    pub fn masked_mean(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let d = v.cols();
        let mut out = Vec::with_capacity(groups.len() * d);
        for grp in &groups {
            if grp.is_empty() {
                return Err(Error::Empty("masked_mean group (all positions masked)"));
            }
            for c in 0..d {
                let s: f64 = grp.iter().map(|&r| v.row(r)[c].as_f64()).sum();
                out.push(S::of(s / grp.len() as f64));
            }
        }
        let t = Tensor::new(vec![groups.len(), d], out)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(t, Op::MaskedMean { x, groups }, g))
    }

    /// `sum_i w_i x_i` for constant weights `w` shaped like `x`.
    pub fn weighted_sum(&mut self, x: Var, w: &[f64]) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.numel() != w.len() {
            return Err(Error::shape("weighted_sum: weight count"));
        }
        let s = v.data().iter().zip(w).map(|(a, b)| a.as_f64() * b).sum::<f64>();
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(S::of(s)), Op::WeightedSum { x, w: w.to_vec() }, g))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Graph(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dout) = grads[i].take() else { continue };
            self.backprop_node(i, &dout, &mut grads)?;
            grads[i] = Some(dout);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, dout: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (av.rows(), av.cols());
                let n = node.value.cols();
                if self.needs_grad(a) {
                    let bd = self.f64s(b);
                    let da = if trans_b { matmul_raw(dout, &bd, m, n, k) } else { matmul_bt_raw(dout, &bd, m, n, k) };
                    self.acc(grads, a, da);
                }
                if self.needs_grad(b) {
                    let ad = self.f64s(a);
                    let db = if trans_b { matmul_at_raw(dout, &ad, m, n, k) } else { matmul_at_raw(&ad, dout, m, k, n) };
                    self.acc(grads, b, db);
                }
                let _ = bv;
            }
            &Op::AddBias { x, bias } => {
                let n = node.value.cols();
                if self.needs_grad(bias) {
                    let mut db = vec![0.0; n];
                    for (j, g) in dout.iter().enumerate() {
                        db[j % n] += g;
                    }
                    self.acc(grads, bias, db);
                }
                self.acc(grads, x, dout.to_vec());
            }
            &Op::Add { a, b } => {
                self.acc(grads, a, dout.to_vec());
                self.acc(grads, b, dout.to_vec());
            }
            &Op::Scale { x, s } => {
                let f = self.nodes[s.0].value.data()[0].as_f64();
                if self.needs_grad(s) {
                    let xd = self.f64s(x);
                    self.acc(grads, s, vec![dot(dout, &xd)]);
                }
                if self.needs_grad(x) {
                    self.acc(grads, x, dout.iter().map(|g| g * f).collect());
                }
            }
            &Op::MulConst { x, c } => self.acc(grads, x, dout.iter().map(|g| g * c).collect()),
            &Op::Gelu { x } => {
                let xd = self.f64s(x);
                let dx = xd
                    .iter()
                    .zip(dout)
                    .map(|(&x, &g)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.acc(grads, x, dx);
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let xv = &self.nodes[x.0].value;
                let n = xv.cols();
                let gv = self.f64s(*gamma);
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dx = vec![0.0; xv.numel()];
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let xhat: Vec<f64> = row.iter().map(|v| (v.as_f64() - mean[r]) * rstd[r]).collect();
                    let go = &dout[r * n..(r + 1) * n];
                    let mut dxhat = vec![0.0; n];
                    for c in 0..n {
                        dgamma[c] += go[c] * xhat[c];
                        dbeta[c] += go[c];
                        dxhat[c] = go[c] * gv[c];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / n as f64;
                    let m2 = dot(&dxhat, &xhat) / n as f64;
                    for c in 0..n {
                        dx[r * n + c] = rstd[r] * (dxhat[c] - m1 - xhat[c] * m2);
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::Gather { src, idx } => {
                if self.needs_grad(*src) {
                    let sv = &self.nodes[src.0].value;
                    let c = sv.cols();
                    let mut ds = vec![0.0; sv.numel()];
                    for (r, &row) in idx.iter().enumerate() {
                        for j in 0..c {
                            ds[row * c + j] += dout[r * c + j];
                        }
                    }
                    self.acc(grads, *src, ds);
                }
            }
            Op::CausalAttention { qkv, batch, seq, heads, probs } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let x = self.f64s(*qkv);
                let d = node.value.cols();
                let dh = d / heads;
                let w = 3 * d;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dx = vec![0.0; x.len()];
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        for q in 0..seq {
                            let pbase = ((b * heads + h) * seq + q) * seq;
                            let p = &probs[pbase..pbase + q + 1];
                            let go = &dout[(b * seq + q) * d + h * dh..(b * seq + q) * d + (h + 1) * dh];
                            for j in 0..=q {
                                let vi = (b * seq + j) * w + 2 * d + h * dh;
                                dp[j] = dot(go, &x[vi..vi + dh]);
                                for (t, &g) in go.iter().enumerate() {
                                    dx[vi + t] += p[j] * g;
                                }
                            }
                            let s: f64 = (0..=q).map(|j| p[j] * dp[j]).sum();
                            let qi = (b * seq + q) * w + h * dh;
                            for j in 0..=q {
                                let ds = p[j] * (dp[j] - s) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let ki = (b * seq + j) * w + d + h * dh;
                                for t in 0..dh {
                                    dx[qi + t] += ds * x[ki + t];
                                    dx[ki + t] += ds * x[qi + t];
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *qkv, dx);
            }
            &Op::SenseContext { qk, batch, seq, slots } => {
                let x = self.f64s(qk);
                let d = self.nodes[qk.0].value.cols() / 2;
                let dk = d / slots;
                let scale = 1.0 / (dk as f64).sqrt();
                let c = node.value.to_f64_vec();
                let mut dx = vec![0.0; x.len()];
                for b in 0..batch {
                    for k in 0..slots {
                        for q in 0..seq {
                            let base = ((b * slots + k) * seq + q) * seq;
                            let s: f64 = (0..=q).map(|j| c[base + j] * dout[base + j]).sum();
                            let qi = (b * seq + q) * 2 * d + k * dk;
                            for j in 0..=q {
                                let ds = c[base + j] * (dout[base + j] - s) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let ki = (b * seq + j) * 2 * d + d + k * dk;
                                for t in 0..dk {
                                    dx[qi + t] += ds * x[ki + t];
                                    dx[ki + t] += ds * x[qi + t];
                                }
                            }
                        }
                    }
                }
                self.acc(grads, qk, dx);
            }
            &Op::SlotContrib { c, e, batch, seq, slots } => {
                let cd = self.f64s(c);
                let ed = self.f64s(e);
                let d = self.nodes[e.0].value.cols() / slots;
                let mut dc = vec![0.0; cd.len()];
                let mut de = vec![0.0; ed.len()];
                for b in 0..batch {
                    for k in 0..slots {
                        for q in 0..seq {
                            let ui = (b * seq + q) * slots * d + k * d;
                            let gu = &dout[ui..ui + d];
                            let cb = ((b * slots + k) * seq + q) * seq;
                            for j in 0..=q {
                                let ei = (b * seq + j) * slots * d + k * d;
                                dc[cb + j] = dot(gu, &ed[ei..ei + d]);
                                let w = cd[cb + j];
                                if w != 0.0 {
                                    for t in 0..d {
                                        de[ei + t] += w * gu[t];
                                    }
                                }
                            }
                        }
                    }
                }
                self.acc(grads, c, dc);
                self.acc(grads, e, de);
            }
            &Op::SumSlots { u, slots } => {
                let d = node.value.cols();
                let rows = node.value.rows();
                let mut du = vec![0.0; rows * slots * d];
                for r in 0..rows {
                    for k in 0..slots {
                        du[(r * slots + k) * d..(r * slots + k + 1) * d].copy_from_slice(&dout[r * d..(r + 1) * d]);
                    }
                }
                self.acc(grads, u, du);
            }
            &Op::Softmax { x } => {
                let y = node.value.to_f64_vec();
                let n = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..node.value.rows() {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &dout[r * n..(r + 1) * n]);
                    let s = dot(yr, gr);
                    for c in 0..n {
                        dx[r * n + c] = yr[c] * (gr[c] - s);
                    }
                }
                self.acc(grads, x, dx);
            }
            &Op::ConvexMix { alpha, v, slots } => {
                let ad = self.f64s(alpha);
                let vd = self.f64s(v);
                let d = node.value.cols();
                let rows = node.value.rows();
                let mut da = vec![0.0; ad.len()];
                let mut dv = vec![0.0; vd.len()];
                for r in 0..rows {
                    let go = &dout[r * d..(r + 1) * d];
                    for k in 0..slots {
                        let vi = (r * slots + k) * d;
                        da[r * slots + k] = dot(go, &vd[vi..vi + d]);
                        for t in 0..d {
                            dv[vi + t] = ad[r * slots + k] * go[t];
                        }
                    }
                }
                self.acc(grads, alpha, da);
                self.acc(grads, v, dv);
            }
            Op::CrossEntropy { logits, labels, weights, smoothing, probs } => {
                let vocab = self.nodes[logits.0].value.cols();
                let g0 = dout[0];
                let mut dl = vec![0.0; probs.len()];
                for (r, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for c in 0..vocab {
                        let mut g = probs[r * vocab + c] - smoothing / vocab as f64;
                        if c == labels[r] {
                            g -= 1.0 - smoothing;
                        }
                        dl[r * vocab + c] = g0 * w * g;
                    }
                }
                self.acc(grads, *logits, dl);
            }
            Op::KlDistill { student, teacher, student_probs, weights, tau } => {
                let vocab = self.nodes[student.0].value.cols();
                let g0 = dout[0];
                let mut ds = vec![0.0; teacher.len()];
                for (r, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for c in 0..vocab {
                        let i = r * vocab + c;
                        ds[i] = g0 * w * (student_probs[i] - teacher[i]) / tau;
                    }
                }
                self.acc(grads, *student, ds);
            }
            Op::Diversity { e, slots, weights } => {
                let slots = *slots;
                let ev = &self.nodes[e.0].value;
                let d = ev.cols() / slots;
                let pairs = (slots * (slots - 1)) as f64;
                let mut de = vec![0.0; ev.numel()];
                for (r, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let row: Vec<f64> = ev.row(r).iter().map(|x| x.as_f64()).collect();
                    let hat = normalized_blocks(ev.row(r), slots, d)?;
                    let coef = dout[0] * w / pairs;
                    for k in 0..slots {
                        let hk = &hat[k * d..(k + 1) * d];
                        let mut dh = vec![0.0; d];
                        for l in 0..slots {
                            if l == k {
                                continue;
                            }
                            let hl = &hat[l * d..(l + 1) * d];
                            let c = dot(hk, hl);
                            for t in 0..d {
                                dh[t] += 4.0 * c * hl[t] * coef;
                            }
                        }
                        let nk = norm(&row[k * d..(k + 1) * d]);
                        let proj = dot(hk, &dh);
                        for t in 0..d {
                            de[r * slots * d + k * d + t] = (dh[t] - hk[t] * proj) / nk;
                        }
                    }
                }
                self.acc(grads, *e, de);
            }
            Op::InfoNce { a, p, temp, row_probs, col_probs } => {
                let (av, pv) = (&self.nodes[a.0].value, &self.nodes[p.0].value);
                let (n, d) = (av.rows(), av.cols());
                let ah = normalized_blocks(av.data(), n, d)?;
                let ph = normalized_blocks(pv.data(), n, d)?;
                let g0 = dout[0];
                // dL/dsim
                let mut ds = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        let delta = if i == j { 1.0 } else { 0.0 };
                        ds[i * n + j] = g0 * 0.5 / n as f64 * ((row_probs[i * n + j] - delta) + (col_probs[i * n + j] - delta)) / temp;
                    }
                }
                let mut dah = vec![0.0; n * d];
                let mut dph = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..n {
                        let g = ds[i * n + j];
                        for t in 0..d {
                            dah[i * d + t] += g * ph[j * d + t];
                            dph[j * d + t] += g * ah[i * d + t];
                        }
                    }
                }
                let back = |raw: &Tensor<S>, hat: &[f64], dhat: &[f64]| -> Vec<f64> {
                    let mut out = vec![0.0; n * d];
                    for i in 0..n {
                        let row: Vec<f64> = raw.row(i).iter().map(|x| x.as_f64()).collect();
                        let nr = norm(&row);
                        let h = &hat[i * d..(i + 1) * d];
                        let gh = &dhat[i * d..(i + 1) * d];
                        let pr = dot(h, gh);
                        for t in 0..d {
                            out[i * d + t] = (gh[t] - h[t] * pr) / nr;
                        }
                    }
                    out
                };
                if self.needs_grad(*a) {
                    self.acc(grads, *a, back(av, &ah, &dah));
                }
                if self.needs_grad(*p) {
                    self.acc(grads, *p, back(pv, &ph, &dph));
                }
            }
            Op::SlotPool { u, slots, temp, w, r } => {
                let slots = *slots;
                let uv = &self.nodes[u.0].value;
                let d = uv.cols() / slots;
                let mut du = vec![0.0; uv.numel()];
                for i in 0..uv.rows() {
                    let row: Vec<f64> = uv.row(i).iter().map(|x| x.as_f64()).collect();
                    let go = &dout[i * d..(i + 1) * d];
                    let wi = &w[i * slots..(i + 1) * slots];
                    let dw: Vec<f64> = (0..slots).map(|k| dot(go, &row[k * d..(k + 1) * d])).collect();
                    let s = dot(wi, &dw);
                    for k in 0..slots {
                        let dr = wi[k] * (dw[k] - s) / temp;
                        let rk = r[i * slots + k];
                        for t in 0..d {
                            let x = row[k * d + t];
                            du[i * slots * d + k * d + t] = wi[k] * go[t] + dr * x / rk;
                        }
                    }
                }
                self.acc(grads, *u, du);
            }
            Op::MaskedMean { x, groups } => {
                let xv = &self.nodes[x.0].value;
                let d = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                for (gi, grp) in groups.iter().enumerate() {
                    let inv = 1.0 / grp.len() as f64;
                    for &r in grp {
                        for c in 0..d {
                            dx[r * d + c] += dout[gi * d + c] * inv;
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::WeightedSum { x, w } => self.acc(grads, *x, w.iter().map(|v| v * dout[0]).collect()),
        }
        Ok(())
    }
}

/// Unit-normalizes each of the `blocks` consecutive length-`d` blocks.
fn normalized_blocks<S: Scalar>(xs: &[S], blocks: usize, d: usize) -> Result<Vec<f64>> {
    let mut out: Vec<f64> = xs.iter().map(|x| x.as_f64()).collect();
    for k in 0..blocks {
        let blk = &mut out[k * d..(k + 1) * d];
        let n = norm(blk);
        if n < EPS {
            return Err(Error::DegenerateVector("slot vector"));
        }
        blk.iter_mut().for_each(|x| *x /= n);
    }
    Ok(out)
}

/// `d loss / d p` for each `p`, as tensors shaped like the parameters.
///
/// Fails when `loss` is not scalar or a `p` is not a differentiable node of
/// `graph`. Parameters the loss does not depend on get all-zero gradients.
pub fn gradients<S: Scalar>(graph: &Graph<S>, loss: Var, params: &[Var]) -> Result<Vec<Tensor<S>>> {
    for p in params {
        if p.0 >= graph.len() || !graph.needs_grad(*p) {
            return Err(Error::Graph(format!("node {} is not a differentiable node of this graph", p.0)));
        }
    }
    let grads = graph.backward(loss)?;
    params
        .iter()
        .map(|&p| {
            let shape = graph.value(p).shape().to_vec();
            let data = match grads.get(p) {
                Some(g) => g.iter().map(|&x| S::of(x)).collect(),
                None => vec![S::zero(); graph.value(p).numel()],
            };
            Tensor::new(shape, data)
        })
        .collect()
}
