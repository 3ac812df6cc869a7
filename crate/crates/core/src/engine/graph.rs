//! Tape-based reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node holding its value plus
//! whatever the backward pass needs. Nodes are stored in creation order, so
//! a reverse sweep over indices is a valid topological order.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;

use super::ops::{self, LayerNormCache};
use super::real::Real;
use super::tensor::Tensor;
use super::EngineError;

/// Index of a parameter inside a [`crate::engine::Params`] store.
pub type ParamId = usize;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct AttentionSaved<R> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    segments: Vec<Range<usize>>,
    /// Softmax output per (segment, head), each `len x len`, concatenated.
    probs: Vec<R>,
    /// Inverted-dropout mask applied to `probs`, same layout.
    mask: Option<Vec<R>>,
}

enum Op<R> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, R),
    MulConst(Var, Vec<R>),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache<R>,
    },
    SoftmaxRows(Var),
    Attention(Box<AttentionSaved<R>>),
    ConcatRows(Var, Var),
    GatherRows(Var, Vec<usize>),
    Bce {
        logits: Var,
        targets: Vec<R>,
        weights: Vec<R>,
    },
    L1 {
        x: Var,
        rows: Vec<usize>,
        target: Tensor<R>,
    },
    SumSquares(Var),
    Sum(Var),
}

impl<R> Op<R> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::Attention(_) => "attention",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::Bce { .. } => "bce_with_logits",
            Op::L1 { .. } => "l1",
            Op::SumSquares(_) => "sum_squares",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// Gradients keyed by parameter id.
#[derive(Debug, Clone, Default)]
pub struct Gradients<R> {
    by_param: BTreeMap<ParamId, Tensor<R>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<R>> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<R>)> {
        self.by_param.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Adds `g` into the gradient for `id`.
    pub fn accumulate(&mut self, id: ParamId, g: Tensor<R>) {
        match self.by_param.get_mut(&id) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.by_param.insert(id, g);
            }
        }
    }

    /// Adds another gradient set into this one.
    pub fn merge(&mut self, other: Gradients<R>) {
        for (id, g) in other.by_param {
            self.accumulate(id, g);
        }
    }
}

/// Recorded computation.
pub struct Graph<R: Real> {
    nodes: Vec<Node<R>>,
    track_params: bool,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            track_params: true,
        }
    }

    /// A graph whose parameters are treated as constants; backward through
    /// it yields no parameter gradients.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            track_params: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, id: ParamId, value: &Tensor<R>) -> Var {
        let track = self.track_params;
        self.push(value.clone(), Op::Param(id), track)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `x [m, n] + bias [n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias);
        assert_eq!(xv.cols(), bv.numel(), "add_bias width mismatch");
        let mut out = xv.clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddBias(x, bias), rg)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: R) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// Elementwise product with a constant factor tensor of the same size.
    pub fn mul_const(&mut self, x: Var, factor: Vec<R>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.numel(), factor.len(), "mul_const size mismatch");
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().zip(&factor).map(|(&a, &m)| a * m).collect(),
        );
        let rg = self.rg(x);
        self.push(out, Op::MulConst(x, factor), rg)
    }

    /// Inverted dropout with a freshly drawn mask; identity for `p = 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p == 0.0 {
            return x;
        }
        let mask = ops::dropout_mask(self.value(x).numel(), p, rng);
        self.mul_const(x, mask)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: R) -> Var {
        let (out, cache) = ops::layer_norm_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, cache }, rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = ops::softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Multi-head scaled dot-product attention, restricted to blocks of rows.
    ///
    /// `q`, `k`, `v` are `[T, d]`; rows only attend within their own segment.
    /// With `dropout > 0`, attention probabilities are dropped before mixing.
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Range<usize>],
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert_eq!(qv.shape(), kv.shape(), "attention q/k shape mismatch");
        assert_eq!(qv.shape(), vv.shape(), "attention q/v shape mismatch");
        assert!(heads > 0 && d % heads == 0, "attention width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = R::from_f64(1.0 / (dh as f64).sqrt());
        let total: usize = segments.iter().map(|s| s.len() * s.len()).sum::<usize>() * heads;
        let mut probs = vec![R::ZERO; total];
        let mut out = vec![R::ZERO; qv.numel()];
        let mut off = 0;
        for seg in segments {
            let n = seg.len();
            for h in 0..heads {
                let p = &mut probs[off..off + n * n];
                let base = seg.start * d + h * dh;
                R::gemm(
                    n,
                    dh,
                    n,
                    scale,
                    (&qv.data()[base..], d as isize, 1),
                    (&kv.data()[base..], 1, d as isize),
                    R::ZERO,
                    (p, n as isize, 1),
                );
                for row in p.chunks_mut(n) {
                    ops::softmax_in_place(row);
                }
                off += n * n;
            }
        }
        let mask = if dropout > 0.0 {
            Some(ops::dropout_mask(total, dropout, rng))
        } else {
            None
        };
        let mut off = 0;
        let mut scratch = Vec::new();
        for seg in segments {
            let n = seg.len();
            for h in 0..heads {
                let base = seg.start * d + h * dh;
                let p: &[R] = match &mask {
                    Some(m) => {
                        scratch.clear();
                        scratch.extend(probs[off..off + n * n].iter().zip(&m[off..off + n * n]).map(|(&a, &b)| a * b));
                        &scratch
                    }
                    None => &probs[off..off + n * n],
                };
                R::gemm(
                    n,
                    n,
                    dh,
                    R::ONE,
                    (p, n as isize, 1),
                    (&vv.data()[base..], d as isize, 1),
                    R::ZERO,
                    (&mut out[base..], d as isize, 1),
                );
                off += n * n;
            }
        }
        let out = Tensor::new(qv.shape().to_vec(), out);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let saved = AttentionSaved {
            q,
            k,
            v,
            heads,
            segments: segments.to_vec(),
            probs,
            mask,
        };
        self.push(out, Op::Attention(Box::new(saved)), rg)
    }

    /// Per-head attention probabilities (pre-dropout) of an attention node,
    /// indexed `[segment][head]`.
    pub fn attention_probs(&self, v: Var) -> Option<Vec<Vec<Tensor<R>>>> {
        let Op::Attention(saved) = &self.nodes[v.0].op else {
            return None;
        };
        let mut off = 0;
        let mut out = Vec::with_capacity(saved.segments.len());
        for seg in &saved.segments {
            let n = seg.len();
            let mut heads = Vec::with_capacity(saved.heads);
            for _ in 0..saved.heads {
                heads.push(Tensor::matrix(n, n, saved.probs[off..off + n * n].to_vec()));
                off += n * n;
            }
            out.push(heads);
        }
        Some(out)
    }

    /// Head-averaged attention probabilities (pre-dropout) of an attention
    /// node, one `len x len` matrix per segment.
    pub fn attention_maps(&self, v: Var) -> Option<Vec<Tensor<R>>> {
        let Op::Attention(saved) = &self.nodes[v.0].op else {
            return None;
        };
        let inv = R::ONE / R::from_usize(saved.heads);
        let mut off = 0;
        let mut maps = Vec::with_capacity(saved.segments.len());
        for seg in &saved.segments {
            let n = seg.len();
            let mut m = Tensor::zeros(&[n, n]);
            for _ in 0..saved.heads {
                for (acc, &p) in m.data_mut().iter_mut().zip(&saved.probs[off..off + n * n]) {
                    *acc += p * inv;
                }
                off += n * n;
            }
            maps.push(m);
        }
        Some(maps)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "concat_rows width mismatch");
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let out = Tensor::matrix(av.rows() + bv.rows(), av.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::ConcatRows(a, b), rg)
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::matrix(rows.len(), c, data);
        let rg = self.rg(x);
        self.push(out, Op::GatherRows(x, rows), rg)
    }

    /// Weighted sum of binary cross-entropies of `sigmoid(logits)`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<R>, weights: Vec<R>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.numel(), targets.len(), "bce target count mismatch");
        assert_eq!(lv.numel(), weights.len(), "bce weight count mismatch");
        let loss: R = lv
            .data()
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((&z, &y), &w)| w * ops::bce_with_logit(z, y))
            .sum();
        let rg = self.rg(logits);
        self.push(Tensor::scalar(loss), Op::Bce { logits, targets, weights }, rg)
    }

    /// Mean absolute error between the selected rows of `x` and `target`.
    pub fn l1_rows(&mut self, x: Var, rows: Vec<usize>, target: Tensor<R>) -> Var {
        let xv = self.value(x);
        assert_eq!(target.rows(), rows.len(), "l1 target row count mismatch");
        assert_eq!(target.cols(), xv.cols(), "l1 target width mismatch");
        let count = rows.len() * xv.cols();
        let mut total = R::ZERO;
        for (i, &r) in rows.iter().enumerate() {
            for (&a, &b) in xv.row(r).iter().zip(target.row(i)) {
                total += (a - b).abs();
            }
        }
        let loss = if count == 0 { R::ZERO } else { total / R::from_usize(count) };
        let rg = self.rg(x);
        self.push(Tensor::scalar(loss), Op::L1 { x, rows, target }, rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s: R = self.value(x).data().iter().map(|&v| v * v).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>, EngineError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(EngineError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![R::ONE]));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let mut contribs: Vec<(Var, Tensor<R>)> = Vec::with_capacity(3);
            self.node_backward(node, &g, &mut contribs);
            for (var, c) in contribs {
                if !c.all_finite() {
                    return Err(EngineError::NonFiniteGradient {
                        op: node.op.name(),
                        node: idx,
                    });
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
            if let Op::Param(id) = node.op {
                if !g.all_finite() {
                    return Err(EngineError::NonFiniteGradient { op: "param", node: idx });
                }
                out.accumulate(id, g);
            }
        }
        Ok(out)
    }

    fn node_backward(&self, node: &Node<R>, g: &Tensor<R>, out: &mut Vec<(Var, Tensor<R>)>) {
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    // dA = G @ B^T
                    let mut da = vec![R::ZERO; m * k];
                    R::gemm(
                        m,
                        n,
                        k,
                        R::ONE,
                        (g.data(), n as isize, 1),
                        (bv.data(), 1, n as isize),
                        R::ZERO,
                        (&mut da, k as isize, 1),
                    );
                    out.push((*a, Tensor::new(av.shape().to_vec(), da)));
                }
                if self.rg(*b) {
                    // dB = A^T @ G
                    let mut db = vec![R::ZERO; k * n];
                    R::gemm(
                        k,
                        m,
                        n,
                        R::ONE,
                        (av.data(), 1, k as isize),
                        (g.data(), n as isize, 1),
                        R::ZERO,
                        (&mut db, n as isize, 1),
                    );
                    out.push((*b, Tensor::new(bv.shape().to_vec(), db)));
                }
            }
            Op::AddBias(x, b) => {
                if self.rg(*x) {
                    out.push((*x, g.clone()));
                }
                if self.rg(*b) {
                    let c = g.cols();
                    let mut db = vec![R::ZERO; c];
                    for row in g.data().chunks(c) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    out.push((*b, Tensor::new(self.value(*b).shape().to_vec(), db)));
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    out.push((*a, g.clone()));
                }
                if self.rg(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                out.push((*x, g.map(|v| v * s)));
            }
            Op::MulConst(x, factor) => {
                let data = g.data().iter().zip(factor).map(|(&a, &m)| a * m).collect();
                out.push((*x, Tensor::new(g.shape().to_vec(), data)));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gi, &xi)| gi * ops::gelu_grad_scalar(xi))
                    .collect();
                out.push((*x, Tensor::new(g.shape().to_vec(), data)));
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let c = g.cols();
                let gam = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![R::ZERO; c];
                    let mut dbeta = vec![R::ZERO; c];
                    for (grow, hrow) in g.data().chunks(c).zip(cache.xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * hrow[j];
                            dbeta[j] += grow[j];
                        }
                    }
                    if self.rg(*gamma) {
                        out.push((*gamma, Tensor::new(self.value(*gamma).shape().to_vec(), dg)));
                    }
                    if self.rg(*beta) {
                        out.push((*beta, Tensor::new(self.value(*beta).shape().to_vec(), dbeta)));
                    }
                }
                if self.rg(*x) {
                    let n = R::from_usize(c);
                    let mut dx = vec![R::ZERO; g.numel()];
                    let mut dxhat = vec![R::ZERO; c];
                    for (r, (grow, hrow)) in g.data().chunks(c).zip(cache.xhat.chunks(c)).enumerate() {
                        let mut sum = R::ZERO;
                        let mut sum_h = R::ZERO;
                        for j in 0..c {
                            dxhat[j] = grow[j] * gam[j];
                            sum += dxhat[j];
                            sum_h += dxhat[j] * hrow[j];
                        }
                        let k = cache.rstd[r] / n;
                        for j in 0..c {
                            dx[r * c + j] = k * (n * dxhat[j] - sum - hrow[j] * sum_h);
                        }
                    }
                    out.push((*x, Tensor::new(g.shape().to_vec(), dx)));
                }
            }
            Op::SoftmaxRows(x) => {
                let p = &node.value;
                let c = p.cols();
                let mut dx = vec![R::ZERO; p.numel()];
                for ((prow, grow), drow) in p.data().chunks(c).zip(g.data().chunks(c)).zip(dx.chunks_mut(c)) {
                    ops::softmax_backward_row(prow, grow, drow);
                }
                out.push((*x, Tensor::new(p.shape().to_vec(), dx)));
            }
            Op::Attention(saved) => self.attention_backward(saved, g, out),
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).numel();
                if self.rg(*a) {
                    out.push((*a, Tensor::new(self.value(*a).shape().to_vec(), g.data()[..split].to_vec())));
                }
                if self.rg(*b) {
                    out.push((*b, Tensor::new(self.value(*b).shape().to_vec(), g.data()[split..].to_vec())));
                }
            }
            Op::GatherRows(x, rows) => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape());
                for (i, &r) in rows.iter().enumerate() {
                    for (acc, &v) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                        *acc += v;
                    }
                }
                out.push((*x, dx));
            }
            Op::Bce { logits, targets, weights } => {
                let up = g.item();
                let lv = self.value(*logits);
                let data = lv
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&z, &y), &w)| up * w * (ops::sigmoid(z) - y))
                    .collect();
                out.push((*logits, Tensor::new(lv.shape().to_vec(), data)));
            }
            Op::L1 { x, rows, target } => {
                let xv = self.value(*x);
                let count = rows.len() * xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                if count > 0 {
                    let k = g.item() / R::from_usize(count);
                    for (i, &r) in rows.iter().enumerate() {
                        let trow = target.row(i);
                        let xrow = xv.row(r);
                        for (j, acc) in dx.row_mut(r).iter_mut().enumerate() {
                            let diff = xrow[j] - trow[j];
                            if diff > R::ZERO {
                                *acc += k;
                            } else if diff < R::ZERO {
                                *acc -= k;
                            }
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::SumSquares(x) => {
                let two = R::from_f64(2.0) * g.item();
                out.push((*x, self.value(*x).map(|v| two * v)));
            }
            Op::Sum(x) => {
                let up = g.item();
                out.push((*x, Tensor::full(self.value(*x).shape(), up)));
            }
        }
    }

    fn attention_backward(&self, s: &AttentionSaved<R>, g: &Tensor<R>, out: &mut Vec<(Var, Tensor<R>)>) {
        let (qv, kv, vv) = (self.value(s.q), self.value(s.k), self.value(s.v));
        let d = qv.cols();
        let dh = d / s.heads;
        let scale = R::from_f64(1.0 / (dh as f64).sqrt());
        let mut dq = vec![R::ZERO; qv.numel()];
        let mut dk = vec![R::ZERO; kv.numel()];
        let mut dv = vec![R::ZERO; vv.numel()];
        let mut off = 0;
        let mut dp = Vec::new();
        let mut ds = Vec::new();
        let mut pd = Vec::new();
        for seg in &s.segments {
            let n = seg.len();
            for h in 0..s.heads {
                let base = seg.start * d + h * dh;
                let p = &s.probs[off..off + n * n];
                let m = s.mask.as_ref().map(|m| &m[off..off + n * n]);
                pd.clear();
                match m {
                    Some(m) => pd.extend(p.iter().zip(m).map(|(&a, &b)| a * b)),
                    None => pd.extend_from_slice(p),
                }
                // dV += Pd^T @ dO
                R::gemm(
                    n,
                    n,
                    dh,
                    R::ONE,
                    (&pd, 1, n as isize),
                    (&g.data()[base..], d as isize, 1),
                    R::ONE,
                    (&mut dv[base..], d as isize, 1),
                );
                // dPd = dO @ V^T
                dp.clear();
                dp.resize(n * n, R::ZERO);
                R::gemm(
                    n,
                    dh,
                    n,
                    R::ONE,
                    (&g.data()[base..], d as isize, 1),
                    (&vv.data()[base..], 1, d as isize),
                    R::ZERO,
                    (&mut dp, n as isize, 1),
                );
                if let Some(m) = m {
                    for (a, &b) in dp.iter_mut().zip(m) {
                        *a *= b;
                    }
                }
                ds.clear();
                ds.resize(n * n, R::ZERO);
                for ((prow, grow), drow) in p.chunks(n).zip(dp.chunks(n)).zip(ds.chunks_mut(n)) {
                    ops::softmax_backward_row(prow, grow, drow);
                }
                // dQ = scale * dS @ K ; dK = scale * dS^T @ Q
                R::gemm(
                    n,
                    n,
                    dh,
                    scale,
                    (&ds, n as isize, 1),
                    (&kv.data()[base..], d as isize, 1),
                    R::ONE,
                    (&mut dq[base..], d as isize, 1),
                );
                R::gemm(
                    n,
                    n,
                    dh,
                    scale,
                    (&ds, 1, n as isize),
                    (&qv.data()[base..], d as isize, 1),
                    R::ONE,
                    (&mut dk[base..], d as isize, 1),
                );
                off += n * n;
            }
        }
        let shape = qv.shape().to_vec();
        if self.rg(s.q) {
            out.push((s.q, Tensor::new(shape.clone(), dq)));
        }
        if self.rg(s.k) {
            out.push((s.k, Tensor::new(shape.clone(), dk)));
        }
        if self.rg(s.v) {
            out.push((s.v, Tensor::new(shape, dv)));
        }
    }
}
