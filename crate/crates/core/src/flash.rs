//! Tiled single-pass attention with fused online entropy.
//!
//! The forward pass streams key tiles past each query tile and keeps three
//! running statistics per query row: the running max `m`, the rescaled
//! normalizer `ℓ = Σ exp(s - m)`, and the rescaled logit mass
//! `h = Σ exp(s - m)·(s - m)`. When the max moves from `m` to `m'` every
//! accumulated term is multiplied by `α = exp(m - m')` and its logit shifts by
//! `log α`, which gives
//!
//! ```text
//! h' = α·h + α·log(α)·ℓ + Σ p·log p        (p = exp(s - m'))
//! ℓ' = α·ℓ + Σ p
//! ```
//!
//! and at the end `H = log ℓ - h / ℓ`, `lse = m + log ℓ`.
//!
//! All kernels here expect `Q` already multiplied by the attention scale.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{gemm, Element, Mat, Op};

/// Query-tile rows and key-tile columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileConfig {
    pub block_rows: usize,
    pub block_cols: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            block_rows: 64,
            block_cols: 64,
        }
    }
}

impl TileConfig {
    pub fn new(block_rows: usize, block_cols: usize) -> Result<Self> {
        if block_rows == 0 || block_cols == 0 {
            return Err(Error::Domain(format!(
                "tile sizes must be >= 1, got ({block_rows}, {block_cols})"
            )));
        }
        Ok(Self {
            block_rows,
            block_cols,
        })
    }

    fn validate(&self) -> Result<()> {
        Self::new(self.block_rows, self.block_cols).map(|_| ())
    }
}

/// Online softmax / entropy statistics for one query row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamRowState<T> {
    pub run_max: T,
    pub norm_sum: T,
    pub ent_acc: T,
}

impl<T: Element> Default for StreamRowState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> StreamRowState<T> {
    pub fn new() -> Self {
        Self {
            run_max: T::neg_infinity(),
            norm_sum: T::zero(),
            ent_acc: T::zero(),
        }
    }

    /// Folds a chunk of finite scores into the state.
    ///
    /// The chunk is overwritten with the unnormalized probabilities
    /// `exp(s - new_max)`, and the factor that rescales anything accumulated
    /// against the old max is returned. On the first chunk that factor is 0.
    pub fn absorb(&mut self, scores: &mut [T]) -> T {
        let chunk_max = scores.iter().copied().fold(T::neg_infinity(), T::max);
        let new_max = self.run_max.max(chunk_max);
        if new_max == T::neg_infinity() {
            return T::one();
        }
        let (alpha, alpha_log_alpha) = if self.run_max == T::neg_infinity() {
            (T::zero(), T::zero())
        } else {
            let log_alpha = self.run_max - new_max;
            let alpha = log_alpha.exp();
            (alpha, alpha * log_alpha)
        };
        let mut p_sum = T::zero();
        let mut p_log_p = T::zero();
        for s in scores.iter_mut() {
            let shifted = *s - new_max;
            let p = shifted.exp();
            *s = p;
            p_sum = p_sum + p;
            // log p == shifted exactly; an underflowed p contributes 0
            p_log_p = p_log_p + p * shifted;
        }
        self.ent_acc = alpha * self.ent_acc + alpha_log_alpha * self.norm_sum + p_log_p;
        self.norm_sum = alpha * self.norm_sum + p_sum;
        self.run_max = new_max;
        alpha
    }

    pub fn push(&mut self, score: T) -> T {
        self.absorb(&mut [score])
    }

    pub fn entropy(&self) -> T {
        self.norm_sum.ln() - self.ent_acc / self.norm_sum
    }

    pub fn logsumexp(&self) -> T {
        self.run_max + self.norm_sum.ln()
    }
}

#[derive(Debug, Clone)]
pub struct FlashOutput<T> {
    pub out: Mat<T>,
    pub lse: Vec<T>,
    /// Per-row Shannon entropy of the attention distribution, in nats.
    pub entropy: Vec<T>,
}

/// `softmax(Q Kᵀ) V` together with per-row logsumexp and entropy, without
/// materializing the score matrix. `V` may be wider than `Q`.
pub fn flash_entropy_fwd<T: Element>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    cfg: TileConfig,
) -> Result<FlashOutput<T>> {
    cfg.validate()?;
    if q.cols() != k.cols() {
        return Err(dim_err!("Q has d={} but K has d={}", q.cols(), k.cols()));
    }
    if k.rows() != v.rows() {
        return Err(dim_err!("K has {} rows but V has {}", k.rows(), v.rows()));
    }
    if k.rows() == 0 {
        return Err(Error::Domain("attention over zero keys".into()));
    }
    let (nq, nk, d, dv) = (q.rows(), k.rows(), q.cols(), v.cols());
    let br = cfg.block_rows.min(nq.max(1));
    let bc = cfg.block_cols.min(nk);

    let mut out = Mat::zeros(nq, dv);
    let mut lse = vec![T::zero(); nq];
    let mut entropy = vec![T::zero(); nq];
    let mut scores = vec![T::zero(); br * bc];
    let mut states = vec![StreamRowState::<T>::new(); br];

    for r0 in (0..nq).step_by(br) {
        let rows = br.min(nq - r0);
        let q_tile = &q.as_slice()[r0 * d..(r0 + rows) * d];
        let o_tile = &mut out.as_mut_slice()[r0 * dv..(r0 + rows) * dv];
        states[..rows].fill(StreamRowState::new());

        for c0 in (0..nk).step_by(bc) {
            let cols = bc.min(nk - c0);
            let s = &mut scores[..rows * cols];
            gemm(
                Op::N,
                Op::T,
                rows,
                cols,
                d,
                q_tile,
                d,
                &k.as_slice()[c0 * d..],
                d,
                T::zero(),
                s,
                cols,
            );
            for (r, state) in states[..rows].iter_mut().enumerate() {
                let alpha = state.absorb(&mut s[r * cols..(r + 1) * cols]);
                if alpha != T::one() {
                    for o in &mut o_tile[r * dv..(r + 1) * dv] {
                        *o = *o * alpha;
                    }
                }
            }
            gemm(
                Op::N,
                Op::N,
                rows,
                dv,
                cols,
                s,
                cols,
                &v.as_slice()[c0 * dv..],
                dv,
                T::one(),
                o_tile,
                dv,
            );
        }

        for (r, state) in states[..rows].iter().enumerate() {
            let inv = state.norm_sum.recip();
            for o in &mut o_tile[r * dv..(r + 1) * dv] {
                *o = *o * inv;
            }
            lse[r0 + r] = state.logsumexp();
            entropy[r0 + r] = state.entropy();
        }
    }

    Ok(FlashOutput { out, lse, entropy })
}

#[derive(Debug, Clone)]
pub struct FlashGrads<T> {
    pub dq: Mat<T>,
    pub dk: Mat<T>,
    pub dv: Mat<T>,
}

/// Gradients of `⟨dO, O⟩`, plus `⟨dH, H⟩` when `entropy_grad` is set, with
/// respect to the (pre-scaled) `Q`, `K` and `V` of a forward call.
///
/// Key tiles are the outer loop; `dQ` is accumulated across key tiles in a
/// fixed order, so results are deterministic.
#[allow(clippy::too_many_arguments)]
pub fn flash_entropy_bwd<T: Element>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    o: &Mat<T>,
    d_out: &Mat<T>,
    lse: &[T],
    entropy: &[T],
    d_entropy: &[T],
    entropy_grad: bool,
    cfg: TileConfig,
) -> Result<FlashGrads<T>> {
    cfg.validate()?;
    let (nq, nk, d, dv) = (q.rows(), k.rows(), q.cols(), v.cols());
    if k.cols() != d || v.rows() != nk {
        return Err(dim_err!(
            "inconsistent Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    if o.shape() != (nq, dv) || d_out.shape() != (nq, dv) {
        return Err(dim_err!(
            "O {:?} and dO {:?} must both be {nq}x{dv}",
            o.shape(),
            d_out.shape()
        ));
    }
    if lse.len() != nq || entropy.len() != nq || d_entropy.len() != nq {
        return Err(dim_err!(
            "row statistics have lengths lse={}, H={}, dH={} but Q has {nq} rows",
            lse.len(),
            entropy.len(),
            d_entropy.len()
        ));
    }
    if nk == 0 {
        return Err(Error::Domain("attention over zero keys".into()));
    }

    let delta: Vec<T> = (0..nq)
        .map(|i| {
            d_out
                .row(i)
                .iter()
                .zip(o.row(i))
                .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
        })
        .collect();

    let br = cfg.block_rows.min(nq.max(1));
    let bc = cfg.block_cols.min(nk);
    let mut dq = Mat::zeros(nq, d);
    let mut dk = Mat::zeros(nk, d);
    let mut dvm = Mat::zeros(nk, dv);
    let mut p = vec![T::zero(); br * bc];
    let mut ds = vec![T::zero(); br * bc];
    let mut corr = vec![T::zero(); if entropy_grad { br * bc } else { 0 }];

    for c0 in (0..nk).step_by(bc) {
        let cols = bc.min(nk - c0);
        let k_tile = &k.as_slice()[c0 * d..(c0 + cols) * d];
        let v_tile = &v.as_slice()[c0 * dv..(c0 + cols) * dv];
        let dk_tile = &mut dk.as_mut_slice()[c0 * d..(c0 + cols) * d];
        let dv_tile = &mut dvm.as_mut_slice()[c0 * dv..(c0 + cols) * dv];

        for r0 in (0..nq).step_by(br) {
            let rows = br.min(nq - r0);
            let q_tile = &q.as_slice()[r0 * d..(r0 + rows) * d];
            let do_tile = &d_out.as_slice()[r0 * dv..(r0 + rows) * dv];
            let p = &mut p[..rows * cols];
            let ds = &mut ds[..rows * cols];
            let corr = &mut corr[..if entropy_grad { rows * cols } else { 0 }];

            gemm(Op::N, Op::T, rows, cols, d, q_tile, d, k_tile, d, T::zero(), p, cols);
            // S - L, the log-probabilities
            for r in 0..rows {
                let l = lse[r0 + r];
                for x in &mut p[r * cols..(r + 1) * cols] {
                    *x = *x - l;
                }
            }
            if entropy_grad {
                // S - L + H, kept until P is known
                for r in 0..rows {
                    let h = entropy[r0 + r];
                    for (t, x) in corr[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(&p[r * cols..(r + 1) * cols])
                    {
                        *t = *x + h;
                    }
                }
            }
            for x in p.iter_mut() {
                *x = x.exp();
            }

            gemm(Op::T, Op::N, cols, dv, rows, p, cols, do_tile, dv, T::one(), dv_tile, dv);

            // dP = dO Vᵀ, then dS = P ⊙ (dP - D)
            gemm(Op::N, Op::T, rows, cols, dv, do_tile, dv, v_tile, dv, T::zero(), ds, cols);
            for r in 0..rows {
                let dr = delta[r0 + r];
                for c in 0..cols {
                    let at = r * cols + c;
                    ds[at] = p[at] * (ds[at] - dr);
                }
            }
            if entropy_grad {
                for r in 0..rows {
                    let dh = d_entropy[r0 + r];
                    for c in 0..cols {
                        let at = r * cols + c;
                        ds[at] = ds[at] - dh * p[at] * corr[at];
                    }
                }
            }

            gemm(
                Op::N,
                Op::N,
                rows,
                d,
                cols,
                ds,
                cols,
                k_tile,
                d,
                T::one(),
                &mut dq.as_mut_slice()[r0 * d..(r0 + rows) * d],
                d,
            );
            gemm(Op::T, Op::N, cols, d, rows, ds, cols, q_tile, d, T::one(), dk_tile, d);
        }
    }

    Ok(FlashGrads {
        dq,
        dk,
        dv: dvm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{dense_attention, dense_attention_backward};
    use crate::testutil::normal_mat;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qkv<T: Element>(seed: u64, nq: usize, nk: usize, d: usize) -> (Mat<T>, Mat<T>, Mat<T>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            normal_mat(&mut rng, nq, d),
            normal_mat(&mut rng, nk, d),
            normal_mat(&mut rng, nk, d),
        )
    }

    #[test]
    fn streaming_recurrence_matches_direct_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for len in [1usize, 2, 7, 100] {
            let x = normal_mat::<f64>(&mut rng, 1, len).scale(4.0);
            let mut st = StreamRowState::<f64>::new();
            for &s in x.as_slice() {
                st.push(s);
            }
            let p = crate::tensor::row_softmax(x.as_slice()).unwrap();
            let h = crate::tensor::row_entropy(&p).unwrap();
            assert_abs_diff_eq!(st.entropy(), h, epsilon = 1e-10);
        }
    }

    #[test]
    fn uniform_row_has_log_n_entropy() {
        let (q, _, v) = qkv::<f32>(1, 4, 10, 3);
        let k = Mat::from_fn(10, 3, |_, c| c as f32 * 0.3);
        let r = flash_entropy_fwd(&q, &k, &v, TileConfig::new(3, 4).unwrap()).unwrap();
        for &h in &r.entropy {
            assert_abs_diff_eq!(h, 10f32.ln(), epsilon = 1e-5);
        }
    }

    #[test]
    fn single_tile_equals_direct_softmax() {
        let (q, k, v) = qkv::<f32>(2, 5, 9, 4);
        let r = flash_entropy_fwd(&q, &k, &v, TileConfig::new(64, 64).unwrap()).unwrap();
        for i in 0..5 {
            let mut s: Vec<f32> = (0..9)
                .map(|j| q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum())
                .collect();
            let mut st = StreamRowState::new();
            st.absorb(&mut s);
            // only the score dot products may round differently
            assert_abs_diff_eq!(r.entropy[i], st.entropy(), epsilon = 1e-5);
            assert_abs_diff_eq!(r.lse[i], st.logsumexp(), epsilon = 1e-5);
        }
    }

    #[test]
    fn matches_dense_oracle_512() {
        let (q, k, v) = qkv::<f32>(3, 512, 512, 32);
        let q = q.scale(1.0 / 32f32.sqrt());
        let r = flash_entropy_fwd(&q, &k, &v, TileConfig::default()).unwrap();
        let dense = dense_attention(&q, &k, &v, false).unwrap();
        assert!(r.out.max_abs_diff(&dense.output) < 1e-4);
        for i in 0..512 {
            assert!((r.entropy[i] as f64 - dense.entropy[i]).abs() < 1e-4);
            assert!((r.lse[i] as f64 - dense.logsumexp[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn wide_values_are_supported() {
        let (q, k, _) = qkv::<f64>(4, 7, 13, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Mat<f64> = normal_mat(&mut rng, 13, 6);
        let r = flash_entropy_fwd(&q, &k, &v, TileConfig::new(2, 5).unwrap()).unwrap();
        let dense = dense_attention(&q, &k, &v, false).unwrap();
        assert!(r.out.max_abs_diff(&dense.output) < 1e-12);
    }

    #[test]
    fn forward_errors() {
        let (q, k, v) = qkv::<f32>(6, 4, 4, 3);
        let k2 = Mat::<f32>::zeros(4, 2);
        assert!(matches!(
            flash_entropy_fwd(&q, &k2, &v, TileConfig::default()),
            Err(Error::Dimension(_))
        ));
        let empty = Mat::<f32>::zeros(0, 3);
        assert!(matches!(
            flash_entropy_fwd(&q, &empty, &empty, TileConfig::default()),
            Err(Error::Domain(_))
        ));
        assert!(TileConfig::new(0, 4).is_err());
        let _ = k;
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let (q, k, v) = qkv::<f64>(7, 9, 11, 3);
        let f = flash_entropy_fwd(&q, &k, &v, TileConfig::new(4, 4).unwrap()).unwrap();
        let g = flash_entropy_bwd(
            &q,
            &k,
            &v,
            &f.out,
            &Mat::zeros(9, 3),
            &f.lse,
            &f.entropy,
            &[0.0; 9],
            true,
            TileConfig::new(4, 4).unwrap(),
        )
        .unwrap();
        assert!(g.dq.as_slice().iter().all(|&x| x == 0.0));
        assert!(g.dk.as_slice().iter().all(|&x| x == 0.0));
        assert!(g.dv.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_matches_dense_analytic() {
        let (q, k, v) = qkv::<f64>(8, 64, 64, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d_out: Mat<f64> = normal_mat(&mut rng, 64, 8);
        let dh: Vec<f64> = normal_mat::<f64>(&mut rng, 1, 64).into_vec();
        let cfg = TileConfig::new(16, 8).unwrap();
        let f = flash_entropy_fwd(&q, &k, &v, cfg).unwrap();
        for entropy_grad in [false, true] {
            let g = flash_entropy_bwd(
                &q, &k, &v, &f.out, &d_out, &f.lse, &f.entropy, &dh, entropy_grad, cfg,
            )
            .unwrap();
            let want = dense_attention_backward(&q, &k, &v, &d_out, &dh, entropy_grad).unwrap();
            assert!(g.dq.max_abs_diff(&want.dq) < 1e-5);
            assert!(g.dk.max_abs_diff(&want.dk) < 1e-5);
            assert!(g.dv.max_abs_diff(&want.dv) < 1e-5);
        }
    }

    #[test]
    fn backward_rejects_bad_stats() {
        let (q, k, v) = qkv::<f64>(10, 4, 4, 2);
        let f = flash_entropy_fwd(&q, &k, &v, TileConfig::default()).unwrap();
        let r = flash_entropy_bwd(
            &q,
            &k,
            &v,
            &f.out,
            &f.out,
            &f.lse[..3],
            &f.entropy,
            &[0.0; 4],
            false,
            TileConfig::default(),
        );
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn tile_size_independent(seed in any::<u64>(), br in 1usize..40, bc in 1usize..40) {
            let (q, k, v) = qkv::<f32>(seed, 37, 45, 8);
            let a = flash_entropy_fwd(&q, &k, &v, TileConfig::new(br, bc).unwrap()).unwrap();
            let b = flash_entropy_fwd(&q, &k, &v, TileConfig::new(64, 64).unwrap()).unwrap();
            prop_assert!(a.out.max_abs_diff(&b.out) < 2e-4);
            for i in 0..37 {
                prop_assert!((a.entropy[i] - b.entropy[i]).abs() < 2e-4);
            }
        }

        #[test]
        fn key_permutation_equivariant(seed in any::<u64>()) {
            let (q, k, v) = qkv::<f32>(seed, 20, 30, 4);
            let mut idx: Vec<usize> = (0..30).collect();
            idx.reverse();
            idx.rotate_left((seed % 30) as usize);
            let kp = Mat::from_fn(30, 4, |i, c| k.get(idx[i], c));
            let vp = Mat::from_fn(30, 4, |i, c| v.get(idx[i], c));
            let cfg = TileConfig::new(8, 8).unwrap();
            let a = flash_entropy_fwd(&q, &k, &v, cfg).unwrap();
            let b = flash_entropy_fwd(&q, &kp, &vp, cfg).unwrap();
            prop_assert!(a.out.max_abs_diff(&b.out) < 1e-5);
            for i in 0..20 {
                prop_assert!((a.entropy[i] - b.entropy[i]).abs() < 1e-5);
                prop_assert!((a.lse[i] - b.lse[i]).abs() < 1e-5);
            }
        }

        #[test]
        fn entropy_in_range(seed in any::<u64>(), scale in 0.1f32..10.0) {
            let (q, k, v) = qkv::<f32>(seed, 16, 50, 4);
            let q = q.scale(scale);
            let r = flash_entropy_fwd(&q, &k, &v, TileConfig::new(5, 7).unwrap()).unwrap();
            for &h in &r.entropy {
                prop_assert!(h >= -1e-5 && h <= 50f32.ln() + 1e-5);
            }
        }
    }
}
