//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar result walks the tape once in reverse and
//! returns the gradient of every node that requires one. Nodes whose inputs
//! never require gradients are skipped entirely, which is what keeps frozen
//! host weights cheap.

use std::cell::RefCell;
use std::rc::Rc;

use crate::{Scalar, Tensor};

/// Attention mask shared by all heads of a batch.
#[derive(Debug, Clone)]
pub struct AttnMask {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// `[batch * k_len]`, false marks padding keys.
    pub key_valid: Vec<bool>,
    /// Query `i` may only attend to keys `j <= i`.
    pub causal: bool,
}

impl AttnMask {
    #[inline]
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.key_valid[b * self.k_len + j] && (!self.causal || j <= i)
    }
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddBias(usize, usize),
    MatMul { a: usize, b: usize, trans_b: bool },
    BatchMatMul { a: usize, b: usize, trans_b: bool },
    Gelu(usize),
    Tanh(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    Gather { table: usize, ids: Rc<[usize]> },
    ConcatCols { parts: Vec<usize> },
    SliceRow { a: usize, row: usize, offset: usize },
    Reshape(usize),
    SplitHeads { a: usize, batch: usize, seq: usize, heads: usize },
    MergeHeads { a: usize, batch: usize, seq: usize, heads: usize },
    MaskedSoftmax { a: usize },
    CrossEntropy { logits: usize, targets: Rc<[Option<usize>]>, probs: Vec<T>, scale: T, count: usize },
    SumAll(usize),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation recorder. One tape per forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::with_capacity(512)) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. `requires_grad` marks it as something we want a gradient for.
    pub fn var(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(Rc::new(value), Op::Leaf, requires_grad)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.var(value, false)
    }

    fn push(&self, value: Rc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward needs a scalar loss");
        if !nodes[loss.id].requires_grad {
            return Gradients { grads };
        }
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let req = |i: usize| nodes[i].requires_grad;
            let val = |i: usize| nodes[i].value.as_ref();
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if req(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if req(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if req(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if req(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if req(*a) {
                        accumulate(&mut grads, *a, g.zip_map(val(*b), |x, y| x * y));
                    }
                    if req(*b) {
                        accumulate(&mut grads, *b, g.zip_map(val(*a), |x, y| x * y));
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|v| v * c));
                }
                Op::AddBias(x, b) => {
                    if req(*b) {
                        let n = val(*b).numel();
                        let mut gb = vec![T::zero(); n];
                        for row in g.data().chunks(n) {
                            for (acc, &v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, *b, Tensor::from_vec(val(*b).shape(), gb).unwrap());
                    }
                    if req(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::MatMul { a, b, trans_b } => {
                    let (av, bv) = (val(*a), val(*b));
                    let k = av.last_dim();
                    let m = av.rows();
                    let n = g.last_dim();
                    if req(*a) {
                        let buf = grad_buffer(&mut grads, *a, av.shape());
                        if *trans_b {
                            // dA = dC [m,n] x B [n,k]
                            T::gemm(m, n, k, g.data(), n as isize, 1, bv.data(), k as isize, 1, buf, true);
                        } else {
                            // dA = dC [m,n] x B^T, B is [k,n]
                            T::gemm(m, n, k, g.data(), n as isize, 1, bv.data(), 1, n as isize, buf, true);
                        }
                    }
                    if req(*b) {
                        let buf = grad_buffer(&mut grads, *b, bv.shape());
                        if *trans_b {
                            // dB [n,k] = dC^T [n,m] x A [m,k]
                            T::gemm(n, m, k, g.data(), 1, n as isize, av.data(), k as isize, 1, buf, true);
                        } else {
                            // dB [k,n] = A^T [k,m] x dC [m,n]
                            T::gemm(k, m, n, av.data(), 1, k as isize, g.data(), n as isize, 1, buf, true);
                        }
                    }
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    let (av, bv) = (val(*a), val(*b));
                    let (groups, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                    let n = g.shape()[2];
                    let gd = g.data();
                    if req(*a) {
                        let buf = grad_buffer(&mut grads, *a, av.shape());
                        for gi in 0..groups {
                            let go = &gd[gi * m * n..(gi + 1) * m * n];
                            let bo = &bv.data()[gi * k * n..(gi + 1) * k * n];
                            let out = &mut buf[gi * m * k..(gi + 1) * m * k];
                            if *trans_b {
                                T::gemm(m, n, k, go, n as isize, 1, bo, k as isize, 1, out, true);
                            } else {
                                T::gemm(m, n, k, go, n as isize, 1, bo, 1, n as isize, out, true);
                            }
                        }
                    }
                    if req(*b) {
                        let buf = grad_buffer(&mut grads, *b, bv.shape());
                        for gi in 0..groups {
                            let go = &gd[gi * m * n..(gi + 1) * m * n];
                            let ao = &av.data()[gi * m * k..(gi + 1) * m * k];
                            let out = &mut buf[gi * k * n..(gi + 1) * k * n];
                            if *trans_b {
                                T::gemm(n, m, k, go, 1, n as isize, ao, k as isize, 1, out, true);
                            } else {
                                T::gemm(k, m, n, ao, 1, k as isize, go, n as isize, 1, out, true);
                            }
                        }
                    }
                }
                Op::Gelu(a) => {
                    let x = val(*a);
                    accumulate(&mut grads, *a, g.zip_map(x, |gv, xv| gv * gelu_grad(xv)));
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref();
                    accumulate(&mut grads, *a, g.zip_map(y, |gv, yv| gv * (T::one() - yv * yv)));
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let n = val(*gamma).numel();
                    let gam = val(*gamma).data();
                    if req(*gamma) || req(*beta) {
                        let mut gg = vec![T::zero(); n];
                        let mut gb = vec![T::zero(); n];
                        for (grow, hrow) in g.data().chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                gg[j] += grow[j] * hrow[j];
                                gb[j] += grow[j];
                            }
                        }
                        if req(*gamma) {
                            accumulate(&mut grads, *gamma, Tensor::from_vec(&[n], gg).unwrap());
                        }
                        if req(*beta) {
                            accumulate(&mut grads, *beta, Tensor::from_vec(&[n], gb).unwrap());
                        }
                    }
                    if req(*x) {
                        let nf = T::of(n as f64);
                        let mut dx = vec![T::zero(); g.numel()];
                        for (r, ((grow, hrow), drow)) in
                            g.data().chunks(n).zip(xhat.chunks(n)).zip(dx.chunks_mut(n)).enumerate()
                        {
                            let mut mean_dh = T::zero();
                            let mut mean_dhh = T::zero();
                            for j in 0..n {
                                let dh = grow[j] * gam[j];
                                mean_dh += dh;
                                mean_dhh += dh * hrow[j];
                            }
                            mean_dh /= nf;
                            mean_dhh /= nf;
                            for j in 0..n {
                                let dh = grow[j] * gam[j];
                                drow[j] = rstd[r] * (dh - mean_dh - hrow[j] * mean_dhh);
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::from_vec(val(*x).shape(), dx).unwrap());
                    }
                }
                Op::Gather { table, ids } => {
                    let tv = val(*table);
                    let d = tv.last_dim();
                    let buf = grad_buffer(&mut grads, *table, tv.shape());
                    for (row, &ix) in g.data().chunks(d).zip(ids.iter()) {
                        for (acc, &v) in buf[ix * d..(ix + 1) * d].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let total = g.last_dim();
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let pv = val(p);
                        let w = pv.last_dim();
                        if req(p) {
                            let mut out = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                out.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                            }
                            accumulate(&mut grads, p, Tensor::from_vec(pv.shape(), out).unwrap());
                        }
                        offset += w;
                    }
                }
                Op::SliceRow { a, row, offset } => {
                    let av = val(*a);
                    let start = row * av.last_dim() + offset;
                    let buf = grad_buffer(&mut grads, *a, av.shape());
                    for (acc, &v) in buf[start..start + g.numel()].iter_mut().zip(g.data()) {
                        *acc += v;
                    }
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    accumulate(&mut grads, *a, g.reshape(&shape).unwrap());
                }
                Op::SplitHeads { a, batch, seq, heads } => {
                    let av = val(*a);
                    let merged = merge_heads_data(g.data(), *batch, *seq, *heads, av.last_dim());
                    accumulate(&mut grads, *a, Tensor::from_vec(av.shape(), merged).unwrap());
                }
                Op::MergeHeads { a, batch, seq, heads } => {
                    let av = val(*a);
                    let h = g.last_dim();
                    let split = split_heads_data(g.data(), *batch, *seq, *heads, h);
                    accumulate(&mut grads, *a, Tensor::from_vec(av.shape(), split).unwrap());
                }
                Op::MaskedSoftmax { a, .. } => {
                    let p = node.value.as_ref();
                    let k = p.last_dim();
                    let mut dx = vec![T::zero(); p.numel()];
                    for ((grow, prow), drow) in g.data().chunks(k).zip(p.data().chunks(k)).zip(dx.chunks_mut(k)) {
                        let dot: T = grow.iter().zip(prow).map(|(&gv, &pv)| gv * pv).sum();
                        for j in 0..k {
                            drow[j] = prow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::from_vec(p.shape(), dx).unwrap());
                }
                Op::CrossEntropy { logits, targets, probs, scale, count } => {
                    if *count > 0 {
                        let lv = val(*logits);
                        let v = lv.last_dim();
                        let coef = g.data()[0] * *scale / T::of(*count as f64);
                        let buf = grad_buffer(&mut grads, *logits, lv.shape());
                        for (r, target) in targets.iter().enumerate() {
                            if let Some(t) = target {
                                let prow = &probs[r * v..(r + 1) * v];
                                let out = &mut buf[r * v..(r + 1) * v];
                                for j in 0..v {
                                    out[j] += coef * prow[j];
                                }
                                out[*t] -= coef;
                            }
                        }
                    }
                }
                Op::SumAll(a) => {
                    let av = val(*a);
                    let gv = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(av.shape(), gv));
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn grad_buffer<'g, T: Scalar>(grads: &'g mut [Option<Tensor<T>>], id: usize, shape: &[usize]) -> &'g mut [T] {
    grads[id].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn split_heads_data<T: Scalar>(src: &[T], batch: usize, seq: usize, heads: usize, h: usize) -> Vec<T> {
    let dh = h / heads;
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        for s in 0..seq {
            let row = &src[(b * seq + s) * h..(b * seq + s + 1) * h];
            for hh in 0..heads {
                let dst = ((b * heads + hh) * seq + s) * dh;
                out[dst..dst + dh].copy_from_slice(&row[hh * dh..(hh + 1) * dh]);
            }
        }
    }
    out
}

fn merge_heads_data<T: Scalar>(src: &[T], batch: usize, seq: usize, heads: usize, h: usize) -> Vec<T> {
    let dh = h / heads;
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        for s in 0..seq {
            for hh in 0..heads {
                let from = ((b * heads + hh) * seq + s) * dh;
                let to = (b * seq + s) * h + hh * dh;
                out[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
    out
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.requires_grad();
        self.tape.push(Rc::new(value), op, rg)
    }

    fn binary(&self, other: &Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(Rc::new(value), op, rg)
    }

    pub fn add(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let v = self.value().map(|a| a * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    /// Adds a vector `[n]` to every row of `self [..., n]`.
    pub fn add_bias(&self, bias: &Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let b = bias.value();
        let n = b.numel();
        assert_eq!(x.last_dim(), n, "add_bias width mismatch: {:?} vs {:?}", x.shape(), b.shape());
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let v = Tensor::from_vec(x.shape(), out).unwrap();
        self.binary(bias, v, Op::AddBias(self.id, bias.id))
    }

    /// `self [..., k] x rhs`, where `rhs` is `[k, n]`, or `[n, k]` when `trans_b`.
    pub fn matmul(&self, rhs: &Var<'t, T>, trans_b: bool) -> Var<'t, T> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(b.shape().len(), 2, "matmul rhs must be a matrix, got {:?}", b.shape());
        let k = a.last_dim();
        let m = a.rows();
        let (bk, n) = if trans_b { (b.shape()[1], b.shape()[0]) } else { (b.shape()[0], b.shape()[1]) };
        assert_eq!(k, bk, "matmul inner dimension mismatch: {:?} x {:?} (trans_b={trans_b})", a.shape(), b.shape());
        let mut out = vec![T::zero(); m * n];
        if trans_b {
            T::gemm(m, k, n, a.data(), k as isize, 1, b.data(), 1, k as isize, &mut out, false);
        } else {
            T::gemm(m, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1, &mut out, false);
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let v = Tensor::from_vec(&shape, out).unwrap();
        self.binary(rhs, v, Op::MatMul { a: self.id, b: rhs.id, trans_b })
    }

    /// Per-group product of `[G, m, k]` and `[G, k, n]` (or `[G, n, k]` when `trans_b`).
    pub fn bmm(&self, rhs: &Var<'t, T>, trans_b: bool) -> Var<'t, T> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape().len(), 3, "bmm lhs must be rank 3");
        assert_eq!(b.shape().len(), 3, "bmm rhs must be rank 3");
        let (groups, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        assert_eq!(b.shape()[0], groups, "bmm group mismatch");
        let (bk, n) = if trans_b { (b.shape()[2], b.shape()[1]) } else { (b.shape()[1], b.shape()[2]) };
        assert_eq!(k, bk, "bmm inner dimension mismatch");
        let mut out = vec![T::zero(); groups * m * n];
        for g in 0..groups {
            let ao = &a.data()[g * m * k..(g + 1) * m * k];
            let bo = &b.data()[g * k * n..(g + 1) * k * n];
            let co = &mut out[g * m * n..(g + 1) * m * n];
            if trans_b {
                T::gemm(m, k, n, ao, k as isize, 1, bo, 1, k as isize, co, false);
            } else {
                T::gemm(m, k, n, ao, k as isize, 1, bo, n as isize, 1, co, false);
            }
        }
        let v = Tensor::from_vec(&[groups, m, n], out).unwrap();
        self.binary(rhs, v, Op::BatchMatMul { a: self.id, b: rhs.id, trans_b })
    }

    pub fn gelu(&self) -> Var<'t, T> {
        let v = self.value().map(gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    pub fn tanh(&self) -> Var<'t, T> {
        let v = self.value().map(|x| x.tanh());
        self.unary(v, Op::Tanh(self.id))
    }

    /// `gamma * (x - mean) / sqrt(var + eps) + beta` over the last axis.
    pub fn layer_norm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, eps: T) -> Var<'t, T> {
        let x = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let n = x.last_dim();
        assert_eq!(gv.numel(), n, "layer_norm gamma width mismatch");
        assert_eq!(bv.numel(), n, "layer_norm beta width mismatch");
        let nf = T::of(n as f64);
        let rows = x.rows();
        let mut xhat = vec![T::zero(); x.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let v = Tensor::from_vec(x.shape(), out).unwrap();
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        self.tape.push(
            Rc::new(v),
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, rstd },
            rg,
        )
    }

    /// Row lookup into a `[V, d]` table, producing `[ids.len(), d]`.
    pub fn gather(&self, ids: &[usize]) -> Var<'t, T> {
        let t = self.value();
        let d = t.last_dim();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let v = Tensor::from_vec(&[ids.len(), d], out).unwrap();
        self.unary(v, Op::Gather { table: self.id, ids: ids.into() })
    }

    /// Concatenates `[R, w_i]` matrices along the column axis.
    pub fn concat_cols(parts: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].rows();
        assert!(values.iter().all(|v| v.rows() == rows), "concat row mismatch");
        let total: usize = values.iter().map(|v| v.last_dim()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                out.extend_from_slice(v.row(r));
            }
        }
        let v = Tensor::from_vec(&[rows, total], out).unwrap();
        let rg = parts.iter().any(|p| p.requires_grad());
        tape.push(Rc::new(v), Op::ConcatCols { parts: parts.iter().map(|p| p.id).collect() }, rg)
    }

    /// Row `row` of a `[R, C]` matrix, reshaped to `shape` (which must hold `C` elements).
    pub fn row_as(&self, row: usize, shape: &[usize]) -> Var<'t, T> {
        assert_eq!(shape.iter().product::<usize>(), self.value().last_dim(), "row_as shape must match row width");
        self.row_segment_as(row, 0, shape)
    }

    /// Elements `offset..offset + numel(shape)` of row `row`, reshaped to `shape`.
    pub fn row_segment_as(&self, row: usize, offset: usize, shape: &[usize]) -> Var<'t, T> {
        let a = self.value();
        let len: usize = shape.iter().product();
        let r = a.row(row);
        assert!(offset + len <= r.len(), "row segment {offset}+{len} exceeds row width {}", r.len());
        let v = Tensor::from_vec(shape, r[offset..offset + len].to_vec()).unwrap();
        self.unary(v, Op::SliceRow { a: self.id, row, offset })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t, T> {
        let v = (*self.value()).clone().reshape(shape).expect("reshape element count");
        self.unary(v, Op::Reshape(self.id))
    }

    /// `[batch * seq, h]` to `[batch * heads, seq, h / heads]`.
    pub fn split_heads(&self, batch: usize, seq: usize, heads: usize) -> Var<'t, T> {
        let a = self.value();
        let h = a.last_dim();
        assert_eq!(a.numel(), batch * seq * h, "split_heads size mismatch");
        assert_eq!(h % heads, 0, "hidden width not divisible by heads");
        let data = split_heads_data(a.data(), batch, seq, heads, h);
        let v = Tensor::from_vec(&[batch * heads, seq, h / heads], data).unwrap();
        self.unary(v, Op::SplitHeads { a: self.id, batch, seq, heads })
    }

    /// Inverse of [`split_heads`](Self::split_heads), producing `[batch * seq, h]`.
    pub fn merge_heads(&self, batch: usize, seq: usize, heads: usize) -> Var<'t, T> {
        let a = self.value();
        let dh = a.last_dim();
        let h = dh * heads;
        let data = merge_heads_data(a.data(), batch, seq, heads, h);
        let v = Tensor::from_vec(&[batch * seq, h], data).unwrap();
        self.unary(v, Op::MergeHeads { a: self.id, batch, seq, heads })
    }

    /// Softmax over the key axis of `[batch * heads, q_len, k_len]` scores.
    /// Disallowed positions get probability zero; a fully masked row is all zeros.
    pub fn masked_softmax(&self, mask: Rc<AttnMask>) -> Var<'t, T> {
        let s = self.value();
        let (q, k) = (mask.q_len, mask.k_len);
        assert_eq!(s.shape(), &[mask.batch * mask.heads, q, k], "masked_softmax shape mismatch");
        let mut out = vec![T::zero(); s.numel()];
        for g in 0..mask.batch * mask.heads {
            let b = g / mask.heads;
            for i in 0..q {
                let base = (g * q + i) * k;
                let row = &s.data()[base..base + k];
                let mut mx = T::neg_infinity();
                for j in 0..k {
                    if mask.allowed(b, i, j) && row[j] > mx {
                        mx = row[j];
                    }
                }
                if mx == T::neg_infinity() {
                    continue;
                }
                let mut z = T::zero();
                for j in 0..k {
                    if mask.allowed(b, i, j) {
                        let e = (row[j] - mx).exp();
                        out[base + j] = e;
                        z += e;
                    }
                }
                for o in &mut out[base..base + k] {
                    *o /= z;
                }
            }
        }
        let v = Tensor::from_vec(s.shape(), out).unwrap();
        self.unary(v, Op::MaskedSoftmax { a: self.id })
    }

    /// `scale * mean(-log softmax(logits)[target])` over rows with a target.
    pub fn cross_entropy(&self, targets: &[Option<usize>], scale: T) -> Var<'t, T> {
        let l = self.value();
        let v = l.last_dim();
        assert_eq!(l.rows(), targets.len(), "cross_entropy target count mismatch");
        let mut probs = vec![T::zero(); l.numel()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, target) in targets.iter().enumerate() {
            let row = &l.data()[r * v..(r + 1) * v];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..v {
                let e = (row[j] - mx).exp();
                probs[r * v + j] = e;
                z += e;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p /= z;
            }
            if let Some(t) = target {
                assert!(*t < v, "target id {t} out of range for {v} classes");
                total += -(row[*t] - mx - z.ln());
                count += 1;
            }
        }
        let loss = if count == 0 { T::zero() } else { scale * total / T::of(count as f64) };
        self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: self.id, targets: targets.into(), probs, scale, count },
        )
    }

    pub fn sum_all(&self) -> Var<'t, T> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::SumAll(self.id))
    }
}
