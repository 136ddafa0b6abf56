//! Slow dense reference implementations.
//!
//! Everything here computes in `f64` with plain loops and materializes the
//! full `N × N` matrices. These are the ground truth for tests and for the
//! benchmark's `--verify` mode, never for production paths.

use crate::error::{dim_err, Error, Result};
use crate::monarch::MonarchFactors;
use crate::tensor::{xlogx, Element, Mat};

/// Full dense attention with every intermediate the fast paths report.
#[derive(Debug, Clone)]
pub struct DenseAttnResult {
    pub output: Mat<f64>,
    pub probs: Mat<f64>,
    pub logsumexp: Vec<f64>,
    /// Per-row Shannon entropy of `probs`, in nats.
    pub entropy: Vec<f64>,
}

fn check_qkv<T: Element>(q: &Mat<T>, k: &Mat<T>, v: &Mat<T>) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(dim_err!("Q has d={} but K has d={}", q.cols(), k.cols()));
    }
    if k.rows() != v.rows() {
        return Err(dim_err!("K has {} rows but V has {}", k.rows(), v.rows()));
    }
    Ok(())
}

/// `softmax(Q Kᵀ · s) V` with `s = 1/√d` when `scale` is set, else `s = 1`.
///
/// Scaling is applied to `Q` once, in f64, before any product.
pub fn dense_attention<T: Element>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    scale: bool,
) -> Result<DenseAttnResult> {
    check_qkv(q, k, v)?;
    if k.rows() == 0 {
        return Err(Error::Domain("attention over zero keys".into()));
    }
    let mut q = q.cast::<f64>();
    if scale {
        q = q.scale(1.0 / (q.cols() as f64).sqrt());
    }
    let k = k.cast::<f64>();
    let v = v.cast::<f64>();
    let (nq, nk, d, dv) = (q.rows(), k.rows(), q.cols(), v.cols());

    let mut probs = Mat::zeros(nq, nk);
    let mut output = Mat::zeros(nq, dv);
    let mut logsumexp = vec![0.0; nq];
    let mut entropy = vec![0.0; nq];
    for i in 0..nq {
        let mut scores = vec![0.0; nk];
        for (j, s) in scores.iter_mut().enumerate() {
            let mut acc = 0.0;
            for c in 0..d {
                acc += q.get(i, c) * k.get(j, c);
            }
            *s = acc;
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        logsumexp[i] = max + sum.ln();
        let mut h = 0.0;
        for (j, &s) in scores.iter().enumerate() {
            let p = (s - max).exp() / sum;
            probs.set(i, j, p);
            h -= xlogx(p);
            for c in 0..dv {
                let o = output.get(i, c) + p * v.get(j, c);
                output.set(i, c, o);
            }
        }
        entropy[i] = h;
    }
    Ok(DenseAttnResult {
        output,
        probs,
        logsumexp,
        entropy,
    })
}

/// `⟨A, S⟩ + H(A)` for a row-stochastic `A`.
pub fn variational_objective(a: &Mat<f64>, s: &Mat<f64>) -> Result<f64> {
    if a.shape() != s.shape() {
        return Err(dim_err!("A is {:?} but S is {:?}", a.shape(), s.shape()));
    }
    let mut worst = 0.0f64;
    for i in 0..a.rows() {
        let row = a.row(i);
        if let Some(j) = row.iter().position(|&x| !(x >= 0.0)) {
            return Err(Error::Domain(format!(
                "A[{i},{j}] = {} is not a probability",
                row[j]
            )));
        }
        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
    }
    if worst > 1e-4 {
        return Err(Error::Domain(format!(
            "A is not row-stochastic: worst row-sum deviation {worst:.3e}"
        )));
    }
    let inner: f64 = a
        .as_slice()
        .iter()
        .zip(s.as_slice())
        .map(|(x, y)| x * y)
        .sum();
    let ent: f64 = -a.as_slice().iter().map(|&x| xlogx(x)).sum::<f64>();
    Ok(inner + ent)
}

/// Dense `n × n` Monarch matrix from its factors, using
/// `M[j·b + i, k·b + l] = L[i, j, k] · R[k, i, l]`.
pub fn materialize_monarch<T: Element>(f: &MonarchFactors<T>) -> Result<Mat<f64>> {
    let (m, b) = (f.m(), f.b());
    let n = m * b;
    let (l, r) = (f.l(), f.r());
    let mut out = Mat::zeros(n, n);
    for i in 0..b {
        for j in 0..m {
            let row = out.row_mut(j * b + i);
            for k in 0..m {
                let lijk = l.get(i, j, k).as_f64();
                for (ll, &rv) in r.fiber(k, i).iter().enumerate() {
                    row[k * b + ll] = lijk * rv.as_f64();
                }
            }
        }
    }
    Ok(out)
}

/// `⟨M, Q Kᵀ·s⟩ + H(M)` evaluated block by block from the factors.
///
/// Block `(i, k)` of the permuted Monarch matrix is the outer product
/// `L[i,·,k] ⊗ R[k,i,·]`, so both the inner product and the entropy split
/// into per-factor sums and no `N × N` buffer is built.
pub fn monarch_objective<T: Element>(
    f: &MonarchFactors<T>,
    q: &Mat<T>,
    k: &Mat<T>,
    scale: bool,
) -> Result<f64> {
    let (m, b) = (f.m(), f.b());
    let n = m * b;
    if q.rows() != n || k.rows() != n || q.cols() != k.cols() {
        return Err(dim_err!(
            "factors describe N={n} but Q is {:?} and K is {:?}",
            q.shape(),
            k.shape()
        ));
    }
    let d = q.cols();
    let s = if scale { 1.0 / (d as f64).sqrt() } else { 1.0 };
    let (l, r) = (f.l(), f.r());

    let mut total = 0.0;
    let mut a_l = vec![0.0; d];
    for i in 0..b {
        for kk in 0..m {
            let r_row = r.fiber(kk, i);
            a_l.iter_mut().for_each(|x| *x = 0.0);
            let mut r_mass = 0.0;
            let mut r_xlogx = 0.0;
            for (ll, &rv) in r_row.iter().enumerate() {
                let rv = rv.as_f64();
                r_mass += rv;
                r_xlogx += xlogx(rv);
                for (acc, &kv) in a_l.iter_mut().zip(k.row(kk * b + ll)) {
                    *acc += rv * kv.as_f64();
                }
            }
            let mut l_mass = 0.0;
            let mut l_xlogx = 0.0;
            for j in 0..m {
                let lv = l.get(i, j, kk).as_f64();
                l_mass += lv;
                l_xlogx += xlogx(lv);
                let dot: f64 = q
                    .row(j * b + i)
                    .iter()
                    .zip(&a_l)
                    .map(|(&qv, &a)| qv.as_f64() * s * a)
                    .sum();
                total += lv * dot;
            }
            total -= r_mass * l_xlogx + l_mass * r_xlogx;
        }
    }
    Ok(total)
}

/// Dense score matrix `Q Kᵀ · s` in f64.
pub fn dense_scores<T: Element>(q: &Mat<T>, k: &Mat<T>, scale: bool) -> Result<Mat<f64>> {
    if q.cols() != k.cols() {
        return Err(dim_err!("Q has d={} but K has d={}", q.cols(), k.cols()));
    }
    let s = if scale {
        1.0 / (q.cols() as f64).sqrt()
    } else {
        1.0
    };
    Ok(Mat::from_fn(q.rows(), k.rows(), |i, j| {
        q.row(i)
            .iter()
            .zip(k.row(j))
            .map(|(&a, &b)| a.as_f64() * s * b.as_f64())
            .sum()
    }))
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub dq: Mat<f64>,
    pub dk: Mat<f64>,
    pub dv: Mat<f64>,
}

/// Analytic gradients of `⟨dO, O⟩ (+ ⟨dH, H⟩)` for unscaled attention,
/// built from the full probability matrix.
pub fn dense_attention_backward<T: Element>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    d_out: &Mat<T>,
    d_entropy: &[f64],
    entropy_grad: bool,
) -> Result<DenseGrads> {
    let fwd = dense_attention(q, k, v, false)?;
    if d_out.shape() != fwd.output.shape() || d_entropy.len() != q.rows() {
        return Err(dim_err!("upstream gradient shapes do not match the forward pass"));
    }
    let (q, k, v, d_out) = (
        q.cast::<f64>(),
        k.cast::<f64>(),
        v.cast::<f64>(),
        d_out.cast::<f64>(),
    );
    let (nq, nk, d, dv) = (q.rows(), k.rows(), q.cols(), v.cols());
    let mut dq = Mat::zeros(nq, d);
    let mut dk = Mat::zeros(nk, d);
    let mut dvm = Mat::zeros(nk, dv);
    for i in 0..nq {
        let p = fwd.probs.row(i);
        let dp: Vec<f64> = (0..nk)
            .map(|j| (0..dv).map(|c| d_out.get(i, c) * v.get(j, c)).sum())
            .collect();
        let delta: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
        for j in 0..nk {
            let mut ds = p[j] * (dp[j] - delta);
            if entropy_grad {
                let sij: f64 = (0..d).map(|c| q.get(i, c) * k.get(j, c)).sum();
                ds -= d_entropy[i] * p[j] * (sij - fwd.logsumexp[i] + fwd.entropy[i]);
            }
            for c in 0..d {
                dq.set(i, c, dq.get(i, c) + ds * k.get(j, c));
                dk.set(j, c, dk.get(j, c) + ds * q.get(i, c));
            }
            for c in 0..dv {
                dvm.set(j, c, dvm.get(j, c) + p[j] * d_out.get(i, c));
            }
        }
    }
    Ok(DenseGrads { dq, dk, dv: dvm })
}
