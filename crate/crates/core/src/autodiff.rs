//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so walking the tape backwards visits every node after all
//! of its consumers. Attention and the two retrieval losses are fused ops with
//! hand-written adjoints; everything else is a small primitive.

use crate::loss::softmax::{self, BceCache, SoftmaxBatch, SoftmaxCache};
use crate::tensor::{gemm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which key positions each query position may attend to, for one sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(len: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = vec![false; len * len];
        for i in 0..len {
            for j in 0..len {
                allowed[i * len + j] = f(i, j);
            }
        }
        AttentionMask { len, allowed }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.len + key]
    }

    pub fn allowed_count(&self) -> usize {
        self.allowed.iter().filter(|a| **a).count()
    }
}

enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        masks: Vec<AttentionMask>,
        probs: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Gather {
        src: Var,
        index: Vec<usize>,
    },
    Scatter {
        src: Var,
        index: Vec<usize>,
    },
    Concat(Vec<Var>),
    Periodic {
        angles: Matrix,
        phase: Var,
    },
    TileRows {
        src: Var,
        times: usize,
    },
    WeightedSum {
        x: Var,
        weights: Matrix,
    },
    SampledSoftmax {
        users: Var,
        positives: Var,
        pool: Var,
        tau: Var,
        cache: SoftmaxCache,
    },
    Bce {
        users: Var,
        positives: Var,
        negatives: Var,
        tau: Var,
        cache: BceCache,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar output with respect to every parameter leaf.
#[derive(Debug)]
pub struct Gradients {
    by_param: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, param: usize) -> Option<&Matrix> {
        self.by_param.get(param).and_then(Option::as_ref)
    }

    pub fn into_vec(self) -> Vec<Option<Matrix>> {
        self.by_param
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `0.5 * (1 + tanh(z))` written as a logistic, which needs one `exp`.
#[inline]
fn gelu_gate(x: f64) -> f64 {
    let z = GELU_C * (x + 0.044715 * x * x * x);
    1.0 / (1.0 + (-2.0 * z).exp())
}

#[inline]
fn gelu(x: f64) -> f64 {
    x * gelu_gate(x)
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let s = gelu_gate(x);
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn take_value(mut self, v: Var) -> Matrix {
        std::mem::replace(&mut self.nodes[v.0].value, Matrix::zeros(0, 0))
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A differentiable leaf tied to parameter slot `id`.
    pub fn param(&mut self, id: usize, value: Matrix) -> Var {
        self.push(value, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `x + b` with the `1 x cols` row `b` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows(), 1, "add_row bias must be a row");
        let mut out = self.value(x).clone();
        assert_eq!(out.cols(), bias.cols(), "add_row width");
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(bias.data()) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::AddRow(x, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), cols, "layer_norm gamma width");
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * inv;
            }
            let o = out.row_mut(r);
            let xh = xhat.row(r);
            for c in 0..cols {
                o[c] = g[c] * xh[c] + b[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = gelu(*v);
        }
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Multi-head scaled dot-product attention over stacked sequences.
    ///
    /// `q`, `k`, `v` hold `masks.len()` sequences of `masks[i].len()` rows
    /// each, stacked vertically. Masked logits are excluded before the softmax;
    /// a query with no admissible key produces a zero row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, masks: Vec<AttentionMask>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = qv.shape();
        assert_eq!(kv.shape(), (rows, width), "attention key shape");
        assert_eq!(vv.shape(), (rows, width), "attention value shape");
        assert_eq!(width % heads, 0, "attention heads must divide width");
        let total: usize = masks.iter().map(AttentionMask::len).sum();
        assert_eq!(total, rows, "attention masks must cover all rows");
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(rows, width);
        let prob_len: usize = masks.iter().map(|m| m.len() * m.len()).sum::<usize>() * heads;
        let mut probs = vec![0.0; prob_len];
        let mut offset = 0;
        let mut poff = 0;
        let mut scores = Vec::new();
        for mask in &masks {
            let m = mask.len();
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..m {
                    let qi = &qv.row(offset + i)[c0..c0 + dh];
                    scores.clear();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..m {
                        if mask.allows(i, j) {
                            let kj = &kv.row(offset + j)[c0..c0 + dh];
                            let s = crate::tensor::dot(qi, kj) * scale;
                            max = max.max(s);
                            scores.push((j, s));
                        }
                    }
                    if scores.is_empty() {
                        continue;
                    }
                    let mut z = 0.0;
                    for (_, s) in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let prow = &mut probs[poff + (h * m + i) * m..poff + (h * m + i + 1) * m];
                    for &(j, e) in &scores {
                        prow[j] = e / z;
                    }
                    let orow = &mut out.row_mut(offset + i)[c0..c0 + dh];
                    for &(j, _) in &scores {
                        let p = prow[j];
                        let vj = &vv.row(offset + j)[c0..c0 + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
            offset += m;
            poff += heads * m * m;
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                masks,
                probs,
            },
            ng,
        )
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = crate::tensor::l2_norm(row).max(1e-12);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let ng = self.ng(x);
        self.push(out, Op::L2Normalize { x, norms }, ng)
    }

    pub fn gather_rows(&mut self, src: Var, index: Vec<usize>) -> Var {
        let s = self.value(src);
        let mut out = Matrix::zeros(index.len(), s.cols());
        for (r, &i) in index.iter().enumerate() {
            out.row_mut(r).copy_from_slice(s.row(i));
        }
        let ng = self.ng(src);
        self.push(out, Op::Gather { src, index }, ng)
    }

    /// Places row `r` of `src` at row `index[r]` of a `rows`-row zero matrix.
    pub fn scatter_rows(&mut self, src: Var, index: Vec<usize>, rows: usize) -> Var {
        let s = self.value(src);
        assert_eq!(index.len(), s.rows(), "scatter index length");
        let mut out = Matrix::zeros(rows, s.cols());
        for (r, &i) in index.iter().enumerate() {
            out.row_mut(i).copy_from_slice(s.row(r));
        }
        let ng = self.ng(src);
        self.push(out, Op::Scatter { src, index }, ng)
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut c0 = 0;
        for p in &parts {
            let m = self.value(*p);
            assert_eq!(m.rows(), rows, "concat row count");
            for r in 0..rows {
                out.row_mut(r)[c0..c0 + m.cols()].copy_from_slice(m.row(r));
            }
            c0 += m.cols();
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::Concat(parts), ng)
    }

    /// Fixed-period features: for angle column `i`, emits
    /// `cos(angle + phase[2i])` and `sin(angle + phase[2i + 1])`.
    pub fn periodic(&mut self, angles: Matrix, phase: Var) -> Var {
        let ph = self.value(phase).data();
        assert_eq!(ph.len(), 2 * angles.cols(), "one phase per periodic feature");
        let mut out = Matrix::zeros(angles.rows(), 2 * angles.cols());
        for r in 0..angles.rows() {
            let a = angles.row(r);
            let o = out.row_mut(r);
            for i in 0..a.len() {
                o[2 * i] = (a[i] + ph[2 * i]).cos();
                o[2 * i + 1] = (a[i] + ph[2 * i + 1]).sin();
            }
        }
        let ng = self.ng(phase);
        self.push(out, Op::Periodic { angles, phase }, ng)
    }

    pub fn tile_rows(&mut self, src: Var, times: usize) -> Var {
        let s = self.value(src);
        let mut data = Vec::with_capacity(s.len() * times);
        for _ in 0..times {
            data.extend_from_slice(s.data());
        }
        let out = Matrix::from_vec(s.rows() * times, s.cols(), data);
        let ng = self.ng(src);
        self.push(out, Op::TileRows { src, times }, ng)
    }

    /// Scalar `sum(weights ⊙ x)`.
    pub fn weighted_sum(&mut self, x: Var, weights: Matrix) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), weights.shape(), "weighted_sum shape");
        let s = crate::tensor::dot(xv.data(), weights.data());
        let ng = self.ng(x);
        self.push(Matrix::scalar(s), Op::WeightedSum { x, weights }, ng)
    }

    /// Weighted sampled-softmax loss over a shared negative pool.
    pub fn sampled_softmax(&mut self, users: Var, positives: Var, pool: Var, tau: Var, batch: SoftmaxBatch) -> Var {
        let tau_v = self.value(tau).get(0, 0);
        let cache = softmax::forward(
            self.value(users),
            self.value(positives),
            self.value(pool),
            tau_v,
            batch,
        );
        let out = Matrix::scalar(cache.total);
        let ng = self.ng(users) || self.ng(positives) || self.ng(pool) || self.ng(tau);
        self.push(
            out,
            Op::SampledSoftmax {
                users,
                positives,
                pool,
                tau,
                cache,
            },
            ng,
        )
    }

    /// Weighted binary cross-entropy with one sampled negative per pair.
    pub fn bce(&mut self, users: Var, positives: Var, negatives: Var, tau: Var, weights: Vec<f64>) -> Var {
        let tau_v = self.value(tau).get(0, 0);
        let cache = softmax::bce_forward(
            self.value(users),
            self.value(positives),
            self.value(negatives),
            tau_v,
            weights,
        );
        let out = Matrix::scalar(cache.total);
        let ng = self.ng(users) || self.ng(positives) || self.ng(negatives) || self.ng(tau);
        self.push(
            out,
            Op::Bce {
                users,
                positives,
                negatives,
                tau,
                cache,
            },
            ng,
        )
    }

    /// Per-pair losses recorded by a loss node, if `v` is one.
    pub fn pair_losses(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::SampledSoftmax { cache, .. } => Some(&cache.pair_loss),
            Op::Bce { cache, .. } => Some(&cache.pair_loss),
            _ => None,
        }
    }

    /// Back-propagates from the scalar `output`; returns gradients for the
    /// parameter slots `0..n_params`.
    pub fn backward(&self, output: Var, n_params: usize) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward from a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(1.0));
        let mut by_param: Vec<Option<Matrix>> = (0..n_params).map(|_| None).collect();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => accumulate(&mut by_param, *id, g),
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let bv = self.value(*b);
                        let mut da = Matrix::zeros(g.rows(), bv.rows());
                        gemm(1.0, &g, false, bv, true, 0.0, &mut da);
                        accumulate(&mut grads, a.0, da);
                    }
                    if self.ng(*b) {
                        let av = self.value(*a);
                        let mut db = Matrix::zeros(av.cols(), g.cols());
                        gemm(1.0, av, true, &g, false, 0.0, &mut db);
                        accumulate(&mut grads, b.0, db);
                    }
                }
                Op::AddRow(x, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads, b.0, column_sums(&g));
                    }
                    if self.ng(*x) {
                        accumulate(&mut grads, x.0, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, a.0, g.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, b.0, g);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = g.shape();
                    if self.ng(*gamma) {
                        let mut dg = Matrix::zeros(1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                dg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                            }
                        }
                        accumulate(&mut grads, gamma.0, dg);
                    }
                    if self.ng(*beta) {
                        accumulate(&mut grads, beta.0, column_sums(&g));
                    }
                    if self.ng(*x) {
                        let gam = self.value(*gamma).data();
                        let mut dx = Matrix::zeros(rows, cols);
                        let mut dxhat = vec![0.0; cols];
                        for r in 0..rows {
                            let gr = g.row(r);
                            let xh = xhat.row(r);
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for c in 0..cols {
                                dxhat[c] = gr[c] * gam[c];
                                mean_d += dxhat[c];
                                mean_dx += dxhat[c] * xh[c];
                            }
                            mean_d /= cols as f64;
                            mean_dx /= cols as f64;
                            let inv = inv_std[r];
                            let out = dx.row_mut(r);
                            for c in 0..cols {
                                out[c] = inv * (dxhat[c] - mean_d - xh[c] * mean_dx);
                            }
                        }
                        accumulate(&mut grads, x.0, dx);
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, xi) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *d *= gelu_grad(*xi);
                    }
                    accumulate(&mut grads, x.0, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    masks,
                    probs,
                } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *heads, masks, probs, &g);
                    if self.ng(*q) {
                        accumulate(&mut grads, q.0, dq);
                    }
                    if self.ng(*k) {
                        accumulate(&mut grads, k.0, dk);
                    }
                    if self.ng(*v) {
                        accumulate(&mut grads, v.0, dv);
                    }
                }
                Op::L2Normalize { x, norms } => {
                    let y = &node.value;
                    let mut dx = g;
                    for r in 0..dx.rows() {
                        let yr = y.row(r);
                        let d = crate::tensor::dot(yr, dx.row(r));
                        let n = norms[r];
                        for (o, yi) in dx.row_mut(r).iter_mut().zip(yr) {
                            *o = (*o - yi * d) / n;
                        }
                    }
                    accumulate(&mut grads, x.0, dx);
                }
                Op::Gather { src, index } => {
                    let s = self.value(*src);
                    let mut ds = Matrix::zeros(s.rows(), s.cols());
                    for (r, &i) in index.iter().enumerate() {
                        for (o, x) in ds.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, src.0, ds);
                }
                Op::Scatter { src, index } => {
                    let s = self.value(*src);
                    let mut ds = Matrix::zeros(s.rows(), s.cols());
                    for (r, &i) in index.iter().enumerate() {
                        ds.row_mut(r).copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, src.0, ds);
                }
                Op::Concat(parts) => {
                    let mut c0 = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        if self.ng(*p) {
                            let mut dp = Matrix::zeros(g.rows(), w);
                            for r in 0..g.rows() {
                                dp.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + w]);
                            }
                            accumulate(&mut grads, p.0, dp);
                        }
                        c0 += w;
                    }
                }
                Op::Periodic { angles, phase } => {
                    let ph = self.value(*phase).data();
                    let mut dph = Matrix::zeros(1, ph.len());
                    for r in 0..angles.rows() {
                        let a = angles.row(r);
                        let gr = g.row(r);
                        let d = dph.data_mut();
                        for i in 0..a.len() {
                            d[2 * i] -= (a[i] + ph[2 * i]).sin() * gr[2 * i];
                            d[2 * i + 1] += (a[i] + ph[2 * i + 1]).cos() * gr[2 * i + 1];
                        }
                    }
                    accumulate(&mut grads, phase.0, dph);
                }
                Op::TileRows { src, times } => {
                    let s = self.value(*src);
                    let block = s.len();
                    let mut ds = Matrix::zeros(s.rows(), s.cols());
                    for t in 0..*times {
                        for (o, x) in ds.data_mut().iter_mut().zip(&g.data()[t * block..(t + 1) * block]) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, src.0, ds);
                }
                Op::WeightedSum { x, weights } => {
                    let mut dx = weights.clone();
                    dx.scale(g.get(0, 0));
                    accumulate(&mut grads, x.0, dx);
                }
                Op::SampledSoftmax {
                    users,
                    positives,
                    pool,
                    tau,
                    cache,
                } => {
                    let tau_v = self.value(*tau).get(0, 0);
                    let adj = softmax::backward(
                        self.value(*users),
                        self.value(*positives),
                        self.value(*pool),
                        tau_v,
                        cache,
                        g.get(0, 0),
                    );
                    if self.ng(*users) {
                        accumulate(&mut grads, users.0, adj.users);
                    }
                    if self.ng(*positives) {
                        accumulate(&mut grads, positives.0, adj.positives);
                    }
                    if self.ng(*pool) {
                        accumulate(&mut grads, pool.0, adj.pool);
                    }
                    if self.ng(*tau) {
                        accumulate(&mut grads, tau.0, Matrix::scalar(adj.tau));
                    }
                }
                Op::Bce {
                    users,
                    positives,
                    negatives,
                    tau,
                    cache,
                } => {
                    let tau_v = self.value(*tau).get(0, 0);
                    let adj = softmax::bce_backward(
                        self.value(*users),
                        self.value(*positives),
                        self.value(*negatives),
                        tau_v,
                        cache,
                        g.get(0, 0),
                    );
                    if self.ng(*users) {
                        accumulate(&mut grads, users.0, adj.users);
                    }
                    if self.ng(*positives) {
                        accumulate(&mut grads, positives.0, adj.positives);
                    }
                    if self.ng(*negatives) {
                        accumulate(&mut grads, negatives.0, adj.pool);
                    }
                    if self.ng(*tau) {
                        accumulate(&mut grads, tau.0, Matrix::scalar(adj.tau));
                    }
                }
            }
        }
        Gradients { by_param }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        masks: &[AttentionMask],
        probs: &[f64],
        g: &Matrix,
    ) -> (Matrix, Matrix, Matrix) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = qv.shape();
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Matrix::zeros(rows, width);
        let mut dk = Matrix::zeros(rows, width);
        let mut dv = Matrix::zeros(rows, width);
        let mut dp = Vec::new();
        let mut offset = 0;
        let mut poff = 0;
        for mask in masks {
            let m = mask.len();
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..m {
                    let prow = &probs[poff + (h * m + i) * m..poff + (h * m + i + 1) * m];
                    let go = &g.row(offset + i)[c0..c0 + dh];
                    dp.clear();
                    let mut inner = 0.0;
                    for j in 0..m {
                        if !mask.allows(i, j) {
                            continue;
                        }
                        let p = prow[j];
                        let vj = &vv.row(offset + j)[c0..c0 + dh];
                        let d = crate::tensor::dot(go, vj);
                        inner += p * d;
                        dp.push((j, p, d));
                        let dvj = &mut dv.row_mut(offset + j)[c0..c0 + dh];
                        for (o, x) in dvj.iter_mut().zip(go) {
                            *o += p * x;
                        }
                    }
                    for &(j, p, d) in &dp {
                        let ds = p * (d - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kv.row(offset + j)[c0..c0 + dh];
                        let dqi = &mut dq.row_mut(offset + i)[c0..c0 + dh];
                        for (o, x) in dqi.iter_mut().zip(kj) {
                            *o += ds * x;
                        }
                        let qi = &qv.row(offset + i)[c0..c0 + dh];
                        let dkj = &mut dk.row_mut(offset + j)[c0..c0 + dh];
                        for (o, x) in dkj.iter_mut().zip(qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
            offset += m;
            poff += heads * m * m;
        }
        (dq, dk, dv)
    }
}

fn accumulate(slots: &mut [Option<Matrix>], idx: usize, g: Matrix) {
    match &mut slots[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, x) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Builds `sum(w ⊙ f(params))` and checks every parameter entry against
    /// central differences.
    fn check(
        params: Vec<Matrix>,
        build: impl Fn(&mut Graph, &[Var]) -> Var,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |ps: &[Matrix], weights: Option<&Matrix>| -> (f64, Option<Gradients>, Matrix) {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().enumerate().map(|(i, p)| g.param(i, p.clone())).collect();
            let out = build(&mut g, &vars);
            let shape = g.value(out).shape();
            let w = match weights {
                Some(w) => w.clone(),
                None => Matrix::filled(shape.0, shape.1, 0.0),
            };
            let s = g.weighted_sum(out, w.clone());
            let val = g.value(s).get(0, 0);
            let grads = weights.map(|_| g.backward(s, ps.len()));
            (val, grads, w)
        };
        let (_, _, shape_probe) = eval(&params, None);
        let weights = Matrix::uniform(shape_probe.rows(), shape_probe.cols(), 1.0, &mut rng);
        let (_, grads, _) = eval(&params, Some(&weights));
        let grads = grads.unwrap();
        let h = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            for e in 0..p.len() {
                let mut plus = params.clone();
                plus[pi].data_mut()[e] += h;
                let mut minus = params.clone();
                minus[pi].data_mut()[e] -= h;
                let fd = (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * h);
                let an = grads.get(pi).map_or(0.0, |g| g.data()[e]);
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-5,
                    "param {pi} entry {e}: analytic {an} vs numeric {fd}"
                );
            }
        }
    }

    fn rand_m(r: usize, c: usize, seed: u64) -> Matrix {
        Matrix::uniform(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn matmul_and_bias_gradients() {
        check(vec![rand_m(3, 4, 1), rand_m(4, 2, 2), rand_m(1, 2, 3)], |g, v| {
            let m = g.matmul(v[0], v[1]);
            g.add_row(m, v[2])
        });
    }

    #[test]
    fn layer_norm_and_gelu_gradients() {
        check(vec![rand_m(3, 5, 4), rand_m(1, 5, 5), rand_m(1, 5, 6)], |g, v| {
            let ln = g.layer_norm(v[0], v[1], v[2]);
            g.gelu(ln)
        });
    }

    #[test]
    fn attention_gradients_with_causal_masks() {
        let masks = vec![
            AttentionMask::from_fn(3, |i, j| j >= i),
            AttentionMask::from_fn(2, |i, j| j >= i && j < 1),
        ];
        check(vec![rand_m(5, 4, 7), rand_m(5, 4, 8), rand_m(5, 4, 9)], move |g, v| {
            g.attention(v[0], v[1], v[2], 2, masks.clone())
        });
    }

    #[test]
    fn normalize_gather_scatter_tile_concat_gradients() {
        check(vec![rand_m(3, 3, 10), rand_m(2, 3, 11)], |g, v| {
            let n = g.l2_normalize(v[0]);
            let gth = g.gather_rows(n, vec![2, 0, 2]);
            let t = g.tile_rows(v[1], 2);
            let sc = g.scatter_rows(gth, vec![3, 0, 1], 4);
            let c = g.concat_cols(vec![sc, t]);
            g.add(c, c)
        });
    }

    #[test]
    fn periodic_phase_gradients() {
        let angles = rand_m(4, 3, 12);
        check(vec![rand_m(1, 6, 13)], move |g, v| g.periodic(angles.clone(), v[0]));
    }

    #[test]
    fn query_without_admissible_keys_yields_zero_row() {
        let mut g = Graph::new();
        let x = g.constant(rand_m(2, 2, 14));
        let mask = AttentionMask::from_fn(2, |i, j| i == 0 && j == 0);
        let out = g.attention(x, x, x, 1, vec![mask]);
        assert_eq!(g.value(out).row(1), &[0.0, 0.0]);
    }
}
