//! Temperature-scaled sampled softmax with optional log-probability
//! correction, plus the binary cross-entropy baseline.
//!
//! The batched kernels here back the fused graph ops in
//! [`crate::autodiff`]; the single-pair functions are the scalar reference.

use crate::error::{Error, Result};
use crate::tensor::{dot, gemm, Matrix};

/// Everything the batched loss needs besides the embeddings themselves.
#[derive(Clone, Debug)]
pub struct SoftmaxBatch {
    /// `log Q` of each pair's positive.
    pub pos_logq: Vec<f64>,
    /// `log Q` of each pool element.
    pub pool_logq: Vec<f64>,
    /// Row-major `pairs x pool`; `true` removes the element from that pair's
    /// denominator.
    pub mask: Vec<bool>,
    pub weights: Vec<f64>,
    pub spc: bool,
}

#[derive(Debug)]
pub struct SoftmaxCache {
    pub(crate) batch: SoftmaxBatch,
    dots: Matrix,
    pos_dot: Vec<f64>,
    probs: Matrix,
    pos_prob: Vec<f64>,
    pub pair_loss: Vec<f64>,
    pub total: f64,
}

#[derive(Debug)]
pub struct BceCache {
    weights: Vec<f64>,
    pos_dot: Vec<f64>,
    neg_dot: Vec<f64>,
    pub pair_loss: Vec<f64>,
    pub total: f64,
}

pub(crate) struct Adjoints {
    pub users: Matrix,
    pub positives: Matrix,
    pub pool: Matrix,
    pub tau: f64,
}

pub(crate) fn forward(users: &Matrix, positives: &Matrix, pool: &Matrix, tau: f64, batch: SoftmaxBatch) -> SoftmaxCache {
    let (p, d) = users.shape();
    let n = pool.rows();
    assert_eq!(positives.shape(), (p, d), "positives shape");
    assert_eq!(pool.cols(), d, "pool width");
    assert_eq!(batch.mask.len(), p * n, "mask shape");
    assert_eq!(batch.pos_logq.len(), p);
    assert_eq!(batch.pool_logq.len(), n);
    assert_eq!(batch.weights.len(), p);

    let mut dots = Matrix::zeros(p, n);
    gemm(1.0, users, false, pool, true, 0.0, &mut dots);
    let pos_dot: Vec<f64> = (0..p).map(|i| dot(users.row(i), positives.row(i))).collect();

    let mut probs = Matrix::zeros(p, n);
    let mut pos_prob = vec![0.0; p];
    let mut pair_loss = vec![0.0; p];
    let mut total = 0.0;
    for i in 0..p {
        let shift_pos = if batch.spc { batch.pos_logq[i] } else { 0.0 };
        let s_pos = pos_dot[i] / tau - shift_pos;
        let mask = &batch.mask[i * n..(i + 1) * n];
        let row = probs.row_mut(i);
        let mut max = s_pos;
        for j in 0..n {
            if !mask[j] {
                let s = dots.get(i, j) / tau - if batch.spc { batch.pool_logq[j] } else { 0.0 };
                row[j] = s;
                max = max.max(s);
            }
        }
        let mut z = (s_pos - max).exp();
        for j in 0..n {
            if !mask[j] {
                row[j] = (row[j] - max).exp();
                z += row[j];
            }
        }
        for v in row.iter_mut() {
            *v /= z;
        }
        pos_prob[i] = (s_pos - max).exp() / z;
        pair_loss[i] = max + z.ln() - s_pos;
        total += batch.weights[i] * pair_loss[i];
    }
    SoftmaxCache {
        batch,
        dots,
        pos_dot,
        probs,
        pos_prob,
        pair_loss,
        total,
    }
}

pub(crate) fn backward(users: &Matrix, positives: &Matrix, pool: &Matrix, tau: f64, cache: &SoftmaxCache, gout: f64) -> Adjoints {
    let (p, d) = users.shape();
    let n = pool.rows();
    let mut coef = Matrix::zeros(p, n);
    let mut dpos = Matrix::zeros(p, d);
    let mut du = Matrix::zeros(p, d);
    let mut dtau = 0.0;
    let inv_tau = 1.0 / tau;
    for i in 0..p {
        let w = cache.batch.weights[i] * gout;
        let c_pos = w * (cache.pos_prob[i] - 1.0);
        dtau -= c_pos * cache.pos_dot[i] * inv_tau * inv_tau;
        let pr = cache.probs.row(i);
        let cr = coef.row_mut(i);
        for j in 0..n {
            // masked entries carry zero probability
            let c = w * pr[j];
            dtau -= c * cache.dots.get(i, j) * inv_tau * inv_tau;
            cr[j] = c * inv_tau;
        }
        let s = c_pos * inv_tau;
        for (o, x) in du.row_mut(i).iter_mut().zip(positives.row(i)) {
            *o += s * x;
        }
        for (o, x) in dpos.row_mut(i).iter_mut().zip(users.row(i)) {
            *o += s * x;
        }
    }
    gemm(1.0, &coef, false, pool, false, 1.0, &mut du);
    let mut dpool = Matrix::zeros(n, d);
    gemm(1.0, &coef, true, users, false, 0.0, &mut dpool);
    Adjoints {
        users: du,
        positives: dpos,
        pool: dpool,
        tau: dtau,
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn bce_forward(users: &Matrix, positives: &Matrix, negatives: &Matrix, tau: f64, weights: Vec<f64>) -> BceCache {
    let p = users.rows();
    assert_eq!(positives.shape(), users.shape());
    assert_eq!(negatives.shape(), users.shape());
    assert_eq!(weights.len(), p);
    let pos_dot: Vec<f64> = (0..p).map(|i| dot(users.row(i), positives.row(i))).collect();
    let neg_dot: Vec<f64> = (0..p).map(|i| dot(users.row(i), negatives.row(i))).collect();
    let pair_loss: Vec<f64> = (0..p)
        .map(|i| softplus(-pos_dot[i] / tau) + softplus(neg_dot[i] / tau))
        .collect();
    let total = pair_loss.iter().zip(&weights).map(|(l, w)| l * w).sum();
    BceCache {
        weights,
        pos_dot,
        neg_dot,
        pair_loss,
        total,
    }
}

pub(crate) fn bce_backward(users: &Matrix, positives: &Matrix, negatives: &Matrix, tau: f64, cache: &BceCache, gout: f64) -> Adjoints {
    let (p, d) = users.shape();
    let mut du = Matrix::zeros(p, d);
    let mut dp = Matrix::zeros(p, d);
    let mut dn = Matrix::zeros(p, d);
    let mut dtau = 0.0;
    for i in 0..p {
        let w = cache.weights[i] * gout;
        let s_pos = cache.pos_dot[i] / tau;
        let s_neg = cache.neg_dot[i] / tau;
        let c_pos = w * (sigmoid(s_pos) - 1.0);
        let c_neg = w * sigmoid(s_neg);
        dtau -= (c_pos * cache.pos_dot[i] + c_neg * cache.neg_dot[i]) / (tau * tau);
        let (u, pv, nv) = (users.row(i), positives.row(i), negatives.row(i));
        let dur = du.row_mut(i);
        for c in 0..d {
            dur[c] = (c_pos * pv[c] + c_neg * nv[c]) / tau;
        }
        for (o, x) in dp.row_mut(i).iter_mut().zip(u) {
            *o = c_pos * x / tau;
        }
        for (o, x) in dn.row_mut(i).iter_mut().zip(u) {
            *o = c_neg * x / tau;
        }
    }
    Adjoints {
        users: du,
        positives: dp,
        pool: dn,
        tau: dtau,
    }
}

/// Log-probability corrections for one pair: the positive's and each
/// negative's `log Q`.
#[derive(Clone, Copy, Debug)]
pub struct Correction<'a> {
    pub positive: f64,
    pub negatives: &'a [f64],
}

/// Sampled softmax loss of a single `(user, positive)` pair against the
/// unmasked `negatives`, with `s(u, v) = <u, v> / tau`. With a correction,
/// every logit is shifted by minus its candidate's `log Q`.
pub fn sampled_softmax_loss(
    user: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    tau: f64,
    correction: Option<Correction<'_>>,
) -> Result<f64> {
    if let Some(c) = correction {
        if c.negatives.len() != negatives.len() {
            return Err(Error::shape("one log Q per negative"));
        }
    }
    let s_pos = dot(user, positive) / tau - correction.map_or(0.0, |c| c.positive);
    let logits: Vec<f64> = negatives
        .iter()
        .enumerate()
        .map(|(j, n)| dot(user, n) / tau - correction.map_or(0.0, |c| c.negatives[j]))
        .collect();
    let max = logits.iter().copied().fold(s_pos, f64::max);
    let z: f64 = (s_pos - max).exp() + logits.iter().map(|s| (s - max).exp()).sum::<f64>();
    let loss = max + z.ln() - s_pos;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("sampled softmax loss {loss}")));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_logits_give_ln_two() {
        let u = [1.0, 0.0];
        let p = [0.6, 0.8];
        let n = [0.6, -0.8];
        let loss = sampled_softmax_loss(&u, &p, &[&n], 1.0, None).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_negative_closed_form() {
        // u = p, one orthogonal negative: -log(e / (e + 1)) = ln(1 + e^-1)
        let u = [0.0, 1.0];
        let n = [1.0, 0.0];
        let loss = sampled_softmax_loss(&u, &u, &[&n], 1.0, None).unwrap();
        assert!((loss - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn uniform_log_q_cancels() {
        let u = [0.3, 0.4, (1.0f64 - 0.25).sqrt()];
        let p = [1.0, 0.0, 0.0];
        let n1 = [0.0, 1.0, 0.0];
        let n2 = [0.0, 0.0, 1.0];
        let plain = sampled_softmax_loss(&u, &p, &[&n1, &n2], 0.2, None).unwrap();
        let corr = Correction {
            positive: -3.7,
            negatives: &[-3.7, -3.7],
        };
        let spc = sampled_softmax_loss(&u, &p, &[&n1, &n2], 0.2, Some(corr)).unwrap();
        assert!((plain - spc).abs() < 1e-12);
    }

    #[test]
    fn batched_kernel_matches_scalar_reference() {
        let users = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let pos = Matrix::from_rows(&[vec![0.6, 0.8], vec![0.8, 0.6]]);
        let pool = Matrix::from_rows(&[vec![0.6, 0.8], vec![0.8, 0.6], vec![-1.0, 0.0]]);
        let batch = SoftmaxBatch {
            pos_logq: vec![-1.0, -2.0],
            pool_logq: vec![-1.0, -2.0, -0.5],
            mask: vec![true, false, false, false, true, false],
            weights: vec![0.5, 0.5],
            spc: true,
        };
        let cache = forward(&users, &pos, &pool, 0.5, batch);
        let c0 = Correction {
            positive: -1.0,
            negatives: &[-2.0, -0.5],
        };
        let l0 = sampled_softmax_loss(users.row(0), pos.row(0), &[pool.row(1), pool.row(2)], 0.5, Some(c0)).unwrap();
        let c1 = Correction {
            positive: -2.0,
            negatives: &[-1.0, -0.5],
        };
        let l1 = sampled_softmax_loss(users.row(1), pos.row(1), &[pool.row(0), pool.row(2)], 0.5, Some(c1)).unwrap();
        assert!((cache.pair_loss[0] - l0).abs() < 1e-12);
        assert!((cache.pair_loss[1] - l1).abs() < 1e-12);
        assert!((cache.total - 0.5 * (l0 + l1)).abs() < 1e-12);
    }

    #[test]
    fn masked_negative_gets_zero_gradient() {
        let users = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let pos = Matrix::from_rows(&[vec![0.6, 0.8]]);
        let pool = Matrix::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let batch = SoftmaxBatch {
            pos_logq: vec![0.0],
            pool_logq: vec![0.0, 0.0],
            mask: vec![true, false],
            weights: vec![1.0],
            spc: false,
        };
        let cache = forward(&users, &pos, &pool, 1.0, batch);
        let adj = backward(&users, &pos, &pool, 1.0, &cache, 1.0);
        assert_eq!(adj.pool.row(0), &[0.0, 0.0]);
        assert!(adj.pool.row(1).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn bce_matches_closed_form() {
        let users = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let pos = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let neg = Matrix::from_rows(&[vec![0.0, 1.0]]);
        let cache = bce_forward(&users, &pos, &neg, 1.0, vec![1.0]);
        let expect = (1.0 + (-1f64).exp()).ln() + 2f64.ln();
        assert!((cache.total - expect).abs() < 1e-12);
    }
}
