//! Alternating maximization of the entropy-regularized attention objective
//! over Monarch matrices.
//!
//! With `N = m·b`, the token at position `j·b + i` (block `j`, offset `i`) is
//! addressed through two block-diagonal factors:
//!
//! * `R`: `m` blocks of `b × b`, stored `(m, b, b)`; block `k` mixes tokens
//!   inside block `k` of the natural order.
//! * `L`: `b` blocks of `m × m`, stored `(b, m, m)`; block `i` mixes the
//!   tokens sharing offset `i` across blocks.
//!
//! The attention map is `M[j·b + i, k·b + l] = L[i, j, k] · R[k, i, l]` and the
//! output is `O = L (R V)` with the blocked layouts in between. Each half-step
//! solves its concave subproblem exactly with a softmax:
//!
//! ```text
//! R[k,i,:] = softmax_l(aR[k,i]·K[k,l] / c̃R[k,i])     aL[i,k] = Σ_l R[k,i,l] K[k,l]
//!                                                     cL[i,k] = Σ_l R log R
//! L[i,j,:] = softmax_k(Q̃[i,j]·aL[i,k] - cL[i,k])      aR[k,i] = Σ_j L[i,j,k] Q̃[i,j]
//!                                                     cR[k,i] = Σ_j L[i,j,k]
//! ```
//!
//! starting from `aR = Q`, `cR = 1` (the state produced by `L = I`).

use crate::error::{dim_err, Error, Result};
use crate::flash::{flash_entropy_fwd, TileConfig};
use crate::tensor::{gemm, permute_bn_rows, softmax_in_place, Element, Mat, Op, Tensor3};

/// Floor applied inside `log` when forming `cL`.
const LOG_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonarchConfig {
    pub m: usize,
    pub b: usize,
    /// Number of alternating iterations, at least 1.
    pub iters: usize,
    pub clamp_min: f64,
    pub clamp_enabled: bool,
}

impl MonarchConfig {
    /// Two iterations with the `cR ≥ 0.1` clamp.
    pub fn new(m: usize, b: usize) -> Self {
        Self {
            m,
            b,
            iters: 2,
            clamp_min: 0.1,
            clamp_enabled: true,
        }
    }

    pub fn with_iters(mut self, iters: usize) -> Self {
        self.iters = iters;
        self
    }

    pub fn with_clamp(mut self, clamp_min: f64) -> Self {
        self.clamp_min = clamp_min;
        self.clamp_enabled = true;
        self
    }

    /// Disables the clamp so every half-step is an exact argmax.
    pub fn exact(mut self) -> Self {
        self.clamp_enabled = false;
        self
    }

    pub fn n(&self) -> usize {
        self.m * self.b
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.m == 0 || self.b == 0 || self.m * self.b != n {
            return Err(dim_err!(
                "m={} times b={} does not equal N={n}",
                self.m,
                self.b
            ));
        }
        if self.iters == 0 {
            return Err(Error::Domain("at least one iteration is required".into()));
        }
        if !(self.clamp_min >= 0.0) {
            return Err(Error::Domain(format!(
                "clamp_min must be >= 0, got {}",
                self.clamp_min
            )));
        }
        Ok(())
    }
}

/// The two block-diagonal factors of a Monarch attention map.
#[derive(Debug, Clone, PartialEq)]
pub struct MonarchFactors<T> {
    l: Tensor3<T>,
    r: Tensor3<T>,
}

impl<T: Element> MonarchFactors<T> {
    /// `l` is `(b, m, m)` and `r` is `(m, b, b)`.
    pub fn new(l: Tensor3<T>, r: Tensor3<T>) -> Result<Self> {
        let [b, m, m2] = l.dims();
        let [rm, rb, rb2] = r.dims();
        if m != m2 || rb != rb2 || rm != m || rb != b || m == 0 || b == 0 {
            return Err(dim_err!(
                "L {:?} and R {:?} are not (b,m,m) / (m,b,b) for one (m,b)",
                l.dims(),
                r.dims()
            ));
        }
        Ok(Self { l, r })
    }

    pub fn l(&self) -> &Tensor3<T> {
        &self.l
    }

    pub fn r(&self) -> &Tensor3<T> {
        &self.r
    }

    pub fn m(&self) -> usize {
        self.r.dims()[0]
    }

    pub fn b(&self) -> usize {
        self.l.dims()[0]
    }

    pub fn n(&self) -> usize {
        self.m() * self.b()
    }

    /// Largest `|row sum - 1|` over every row of every block of both factors.
    pub fn max_row_sum_error(&self) -> f64 {
        let rows = |t: &Tensor3<T>| {
            let w = t.dims()[2];
            t.as_slice()
                .chunks(w)
                .map(|row| (row.iter().map(|x| x.as_f64()).sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max)
        };
        rows(&self.l).max(rows(&self.r))
    }
}

/// Intermediates carried between half-steps.
#[derive(Debug, Clone)]
pub struct IterState<T> {
    /// `(m, b, d)`
    pub a_r: Tensor3<T>,
    /// `(m, b)`
    pub c_r: Mat<T>,
    /// `(b, m, d)`, present after the first R-update.
    pub a_l: Option<Tensor3<T>>,
    /// `(b, m)`, present after the first R-update.
    pub c_l: Option<Mat<T>>,
}

/// `aR = Q` viewed as `(m, b, d)`, `cR = 1`.
pub fn init_state<T: Element>(q: &Mat<T>, cfg: &MonarchConfig) -> Result<IterState<T>> {
    cfg.validate(q.rows())?;
    q.ensure_finite("Q")?;
    Ok(IterState {
        a_r: Tensor3::from_mat_blocks(q, cfg.b)?,
        c_r: Mat::from_raw(cfg.m, cfg.b, vec![T::one(); cfg.m * cfg.b]),
        a_l: None,
        c_l: None,
    })
}

fn effective_c_r<T: Element>(c: T, cfg: &MonarchConfig) -> Result<T> {
    if cfg.clamp_enabled {
        Ok(c.max(T::of_f64(cfg.clamp_min)))
    } else if c > T::zero() {
        Ok(c)
    } else {
        Err(Error::Domain(format!(
            "cR entry {c} is not positive and clamping is disabled"
        )))
    }
}

/// Solves for `R` given the current `aR`, `cR`, and refreshes `aL`, `cL`.
///
/// `kb` is `K` viewed as `(m, b, d)`.
pub fn r_update<T: Element>(
    state: &mut IterState<T>,
    kb: &Tensor3<T>,
    cfg: &MonarchConfig,
) -> Result<Tensor3<T>> {
    let [m, b, d] = state.a_r.dims();
    if kb.dims() != [m, b, d] || state.c_r.shape() != (m, b) {
        return Err(dim_err!(
            "K blocks {:?} do not match aR {:?}",
            kb.dims(),
            state.a_r.dims()
        ));
    }
    let floor = T::of_f64(LOG_FLOOR);
    let mut r = Tensor3::zeros(m, b, b);
    let mut a_l = Tensor3::zeros(b, m, d);
    let mut c_l = Mat::zeros(b, m);
    let mut a_l_block = vec![T::zero(); b * d];

    for k in 0..m {
        let k_block = kb.block(k);
        let r_block = r.block_mut(k);
        gemm(Op::N, Op::T, b, b, d, state.a_r.block(k), d, k_block, d, T::zero(), r_block, b);
        for i in 0..b {
            let c = effective_c_r(state.c_r.get(k, i), cfg)?;
            let row = &mut r_block[i * b..(i + 1) * b];
            for x in row.iter_mut() {
                *x = *x / c;
            }
            softmax_in_place(row);
            let ent = row
                .iter()
                .fold(T::zero(), |acc, &p| acc + p * p.max(floor).ln());
            c_l.set(i, k, ent);
        }
        gemm(Op::N, Op::N, b, d, b, r_block, b, k_block, d, T::zero(), &mut a_l_block, d);
        for i in 0..b {
            a_l.fiber_mut(i, k).copy_from_slice(&a_l_block[i * d..(i + 1) * d]);
        }
    }

    state.a_l = Some(a_l);
    state.c_l = Some(c_l);
    Ok(r)
}

/// Solves for `L` given the current `aL`, `cL`, and refreshes `aR`, `cR`.
///
/// `qb` is the permuted query view `(b, m, d)`, `qb[i, j] = Q[j·b + i]`.
pub fn l_update<T: Element>(
    state: &mut IterState<T>,
    qb: &Tensor3<T>,
    _cfg: &MonarchConfig,
) -> Result<Tensor3<T>> {
    let (a_l, c_l) = match (&state.a_l, &state.c_l) {
        (Some(a), Some(c)) => (a, c),
        _ => {
            return Err(Error::State(
                "L-update requires aL and cL from a preceding R-update".into(),
            ))
        }
    };
    let [b, m, d] = a_l.dims();
    if qb.dims() != [b, m, d] {
        return Err(dim_err!(
            "permuted Q {:?} does not match aL {:?}",
            qb.dims(),
            a_l.dims()
        ));
    }
    let mut l = Tensor3::zeros(b, m, m);
    let mut a_r = Tensor3::zeros(m, b, d);
    let mut c_r = Mat::zeros(m, b);
    let mut a_r_block = vec![T::zero(); m * d];

    for i in 0..b {
        let q_block = qb.block(i);
        let l_block = l.block_mut(i);
        gemm(Op::N, Op::T, m, m, d, q_block, d, a_l.block(i), d, T::zero(), l_block, m);
        let bias = c_l.row(i);
        for row in l_block.chunks_mut(m) {
            for (x, &c) in row.iter_mut().zip(bias) {
                *x = *x - c;
            }
            softmax_in_place(row);
        }
        for k in 0..m {
            let mass = (0..m).fold(T::zero(), |acc, j| acc + l_block[j * m + k]);
            c_r.set(k, i, mass);
        }
        gemm(Op::T, Op::N, m, d, m, l_block, m, q_block, d, T::zero(), &mut a_r_block, d);
        for k in 0..m {
            a_r.fiber_mut(k, i).copy_from_slice(&a_r_block[k * d..(k + 1) * d]);
        }
    }

    state.a_r = a_r;
    state.c_r = c_r;
    Ok(l)
}

/// Assembles `O = L (R V)` back in natural token order.
pub fn apply_factors<T: Element>(f: &MonarchFactors<T>, v: &Mat<T>) -> Result<Mat<T>> {
    let (m, b) = (f.m(), f.b());
    if v.rows() != m * b {
        return Err(dim_err!("V has {} rows, factors need {}", v.rows(), m * b));
    }
    let vb = Tensor3::from_mat_blocks(v, b)?;
    let d = v.cols();
    let mut y = Tensor3::zeros(b, m, d);
    let mut y_block = vec![T::zero(); b * d];
    for k in 0..m {
        gemm(Op::N, Op::N, b, d, b, f.r.block(k), b, vb.block(k), d, T::zero(), &mut y_block, d);
        for i in 0..b {
            y.fiber_mut(i, k).copy_from_slice(&y_block[i * d..(i + 1) * d]);
        }
    }
    assemble_output(&f.l, &y, m, b)
}

/// `O[j·b + i] = Σ_k L[i,j,k] · y[i,k]` for `y` laid out `(b, m, d)`.
fn assemble_output<T: Element>(l: &Tensor3<T>, y: &Tensor3<T>, m: usize, b: usize) -> Result<Mat<T>> {
    let d = y.dims()[2];
    let mut out = Mat::zeros(m * b, d);
    let mut o_block = vec![T::zero(); m * d];
    for i in 0..b {
        gemm(Op::N, Op::N, m, d, m, l.block(i), m, y.block(i), d, T::zero(), &mut o_block, d);
        for j in 0..m {
            out.row_mut(j * b + i).copy_from_slice(&o_block[j * d..(j + 1) * d]);
        }
    }
    Ok(out)
}

fn check_qkv<T: Element>(q: &Mat<T>, k: &Mat<T>, v: &Mat<T>, cfg: &MonarchConfig) -> Result<()> {
    if q.shape() != k.shape() || k.rows() != v.rows() {
        return Err(dim_err!(
            "Q {:?}, K {:?}, V {:?} must share N (and d for Q, K)",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    cfg.validate(q.rows())?;
    k.ensure_finite("K")?;
    v.ensure_finite("V")
}

pub(crate) fn attention_scale<T: Element>(d: usize) -> T {
    T::of_f64(1.0 / (d as f64).sqrt())
}

/// Monarch attention with `Q` scaled by `1/√d`, returning the output and the
/// final factors.
pub fn monarch_attention<T: Element>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    cfg: &MonarchConfig,
) -> Result<(Mat<T>, MonarchFactors<T>)> {
    check_qkv(q, k, v, cfg)?;
    let q = q.scale(attention_scale(q.cols()));
    monarch_attention_prescaled(&q, k, v, cfg)
}

/// As [`monarch_attention`] but `Q` is used as given.
pub fn monarch_attention_prescaled<T: Element>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    cfg: &MonarchConfig,
) -> Result<(Mat<T>, MonarchFactors<T>)> {
    check_qkv(q, k, v, cfg)?;
    let qb = Tensor3::from_mat_blocks(&permute_bn_rows(q, cfg.b)?, cfg.m)?;
    let kb = Tensor3::from_mat_blocks(k, cfg.b)?;
    let mut state = init_state(q, cfg)?;
    let mut factors = None;
    for _ in 0..cfg.iters {
        let r = r_update(&mut state, &kb, cfg)?;
        let l = l_update(&mut state, &qb, cfg)?;
        factors = Some((l, r));
    }
    let (l, r) = factors.expect("iters >= 1 checked by validate");
    let f = MonarchFactors { l, r };
    let out = apply_factors(&f, v)?;
    Ok((out, f))
}

/// Monarch attention that never stores `R`.
///
/// Each R-update block is an attention call with queries `aR / c̃R`, keys and
/// values `K_k`: its output is `aL` and its entropy is `-cL`. In the last
/// iteration `V_k` rides along as extra value columns so `R V` comes out of
/// the same pass. Returns the output and the final `L`.
pub fn monarch_attention_fused<T: Element>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    cfg: &MonarchConfig,
    tiles: TileConfig,
) -> Result<(Mat<T>, Tensor3<T>)> {
    check_qkv(q, k, v, cfg)?;
    let q = q.scale(attention_scale(q.cols()));
    monarch_attention_fused_prescaled(&q, k, v, cfg, tiles)
}

pub fn monarch_attention_fused_prescaled<T: Element>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    cfg: &MonarchConfig,
    tiles: TileConfig,
) -> Result<(Mat<T>, Tensor3<T>)> {
    check_qkv(q, k, v, cfg)?;
    let (m, b, d, dv) = (cfg.m, cfg.b, q.cols(), v.cols());
    let qb = Tensor3::from_mat_blocks(&permute_bn_rows(q, cfg.b)?, cfg.m)?;
    let mut state = init_state(q, cfg)?;

    let mut y = Tensor3::zeros(b, m, dv);
    let mut l = None;
    for it in 0..cfg.iters {
        let last = it + 1 == cfg.iters;
        let mut a_l = Tensor3::zeros(b, m, d);
        let mut c_l = Mat::zeros(b, m);
        for kk in 0..m {
            let keys = k.slice_rows(kk * b, (kk + 1) * b);
            let values = if last {
                let vals = v.slice_rows(kk * b, (kk + 1) * b);
                Mat::from_fn(b, d + dv, |r, c| {
                    if c < d {
                        keys.get(r, c)
                    } else {
                        vals.get(r, c - d)
                    }
                })
            } else {
                keys.clone()
            };
            let mut queries = Mat::from_raw(b, d, state.a_r.block(kk).to_vec());
            for i in 0..b {
                let inv = effective_c_r(state.c_r.get(kk, i), cfg)?.recip();
                for x in queries.row_mut(i) {
                    *x = *x * inv;
                }
            }
            let res = flash_entropy_fwd(&queries, &keys, &values, tiles)?;
            for i in 0..b {
                let row = res.out.row(i);
                a_l.fiber_mut(i, kk).copy_from_slice(&row[..d]);
                if last {
                    y.fiber_mut(i, kk).copy_from_slice(&row[d..]);
                }
                c_l.set(i, kk, -res.entropy[i]);
            }
        }
        state.a_l = Some(a_l);
        state.c_l = Some(c_l);
        l = Some(l_update(&mut state, &qb, cfg)?);
    }
    let l = l.expect("iters >= 1 checked by validate");
    let out = assemble_output(&l, &y, m, b)?;
    Ok((out, l))
}

/// MACs performed by [`monarch_attention`]: `t` iterations of both half-steps
/// plus output assembly.
pub fn expected_macs(m: usize, b: usize, d: usize, iters: usize) -> u64 {
    let (m, b, d, t) = (m as u64, b as u64, d as u64, iters as u64);
    t * (2 * m * b * b * d + 2 * b * m * m * d) + (m * b * b * d + b * m * m * d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mac;
    use crate::oracle::{dense_attention, materialize_monarch, monarch_objective};
    use crate::tensor::row_softmax;
    use crate::testutil::normal_mat;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qkv<T: Element>(seed: u64, n: usize, d: usize) -> (Mat<T>, Mat<T>, Mat<T>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            normal_mat(&mut rng, n, d),
            normal_mat(&mut rng, n, d),
            normal_mat(&mut rng, n, d),
        )
    }

    #[test]
    fn init_reshapes_query() {
        let q = Mat::from_fn(6, 1, |i, _| i as f64);
        let s = init_state(&q, &MonarchConfig::new(2, 3)).unwrap();
        assert_eq!(s.a_r.dims(), [2, 3, 1]);
        assert_eq!(s.a_r.as_slice(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(s.c_r.as_slice().iter().all(|&c| c == 1.0));
        assert!(s.a_l.is_none() && s.c_l.is_none());
    }

    #[test]
    fn init_rejects_bad_config() {
        let q = Mat::from_fn(6, 1, |i, _| i as f64);
        assert!(matches!(
            init_state(&q, &MonarchConfig::new(2, 3).with_iters(0)),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            init_state(&q, &MonarchConfig::new(4, 2)),
            Err(Error::Dimension(_))
        ));
        let mut bad = q.clone();
        bad.set(2, 0, f64::NAN);
        assert!(init_state(&bad, &MonarchConfig::new(2, 3)).is_err());
    }

    #[test]
    fn first_r_update_is_per_block_softmax() {
        let (q, k, _) = qkv::<f64>(1, 12, 3);
        let cfg = MonarchConfig::new(3, 4);
        let mut st = init_state(&q, &cfg).unwrap();
        let kb = Tensor3::from_mat_blocks(&k, 4).unwrap();
        let r = r_update(&mut st, &kb, &cfg).unwrap();
        for blk in 0..3 {
            for i in 0..4 {
                let qi = q.row(blk * 4 + i);
                let scores: Vec<f64> = (0..4)
                    .map(|l| qi.iter().zip(k.row(blk * 4 + l)).map(|(a, b)| a * b).sum())
                    .collect();
                let want = row_softmax(&scores).unwrap();
                for l in 0..4 {
                    assert_abs_diff_eq!(r.get(blk, i, l), want[l], epsilon = 1e-14);
                }
            }
        }
    }

    #[test]
    fn m1_first_r_update_is_dense_attention() {
        let (q, k, v) = qkv::<f64>(2, 7, 3);
        let cfg = MonarchConfig::new(1, 7);
        let mut st = init_state(&q, &cfg).unwrap();
        let r = r_update(&mut st, &Tensor3::from_mat_blocks(&k, 7).unwrap(), &cfg).unwrap();
        let dense = dense_attention(&q, &k, &v, false).unwrap();
        for (a, b) in r.as_slice().iter().zip(dense.probs.as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn identical_keys_give_uniform_r() {
        let (q, _, _) = qkv::<f64>(3, 8, 2);
        let k = Mat::from_fn(8, 2, |i, c| if i < 4 { 0.7 + c as f64 } else { (i * c) as f64 });
        let cfg = MonarchConfig::new(2, 4);
        let mut st = init_state(&q, &cfg).unwrap();
        let r = r_update(&mut st, &Tensor3::from_mat_blocks(&k, 4).unwrap(), &cfg).unwrap();
        let c_l = st.c_l.as_ref().unwrap();
        for i in 0..4 {
            for l in 0..4 {
                assert_abs_diff_eq!(r.get(0, i, l), 0.25, epsilon = 1e-15);
            }
            assert_abs_diff_eq!(c_l.get(i, 0), -(4f64.ln()), epsilon = 1e-14);
        }
    }

    #[test]
    fn r_update_refuses_nonpositive_column_mass() {
        let (q, k, _) = qkv::<f64>(4, 6, 2);
        let cfg = MonarchConfig::new(2, 3).exact();
        let mut st = init_state(&q, &cfg).unwrap();
        st.c_r.set(1, 2, 0.0);
        let r = r_update(&mut st, &Tensor3::from_mat_blocks(&k, 3).unwrap(), &cfg);
        assert!(matches!(r, Err(Error::Domain(_))));
        // the clamp rescues the same state
        let cfg = cfg.with_clamp(0.1);
        assert!(r_update(&mut st, &Tensor3::from_mat_blocks(&k, 3).unwrap(), &cfg).is_ok());
    }

    #[test]
    fn l_update_before_r_update_is_a_state_error() {
        let (q, _, _) = qkv::<f64>(5, 6, 2);
        let cfg = MonarchConfig::new(2, 3);
        let mut st = init_state(&q, &cfg).unwrap();
        let qb = Tensor3::from_mat_blocks(&permute_bn_rows(&q, 3).unwrap(), 2).unwrap();
        assert!(matches!(l_update(&mut st, &qb, &cfg), Err(Error::State(_))));
    }

    #[test]
    fn l_update_m1_is_all_ones() {
        let (q, k, _) = qkv::<f64>(6, 5, 2);
        let cfg = MonarchConfig::new(1, 5);
        let mut st = init_state(&q, &cfg).unwrap();
        r_update(&mut st, &Tensor3::from_mat_blocks(&k, 5).unwrap(), &cfg).unwrap();
        let qb = Tensor3::from_mat_blocks(&permute_bn_rows(&q, 5).unwrap(), 1).unwrap();
        let l = l_update(&mut st, &qb, &cfg).unwrap();
        assert!(l.as_slice().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn l_update_uniform_square_case() {
        // cL = 0 and aL identical across k: uniform L rows, cR = b/m = 1 for m = b
        let m = 3;
        let cfg = MonarchConfig::new(m, m);
        let q = Mat::from_fn(9, 2, |i, c| (i + c) as f64 * 0.1);
        let mut st = init_state(&q, &cfg).unwrap();
        st.a_l = Some(Tensor3::from_vec(3, 3, 2, vec![0.4; 18]).unwrap());
        st.c_l = Some(Mat::zeros(3, 3));
        let qb = Tensor3::from_mat_blocks(&permute_bn_rows(&q, 3).unwrap(), 3).unwrap();
        let l = l_update(&mut st, &qb, &cfg).unwrap();
        for &x in l.as_slice() {
            assert_abs_diff_eq!(x, 1.0 / 3.0, epsilon = 1e-15);
        }
        for &c in st.c_r.as_slice() {
            assert_abs_diff_eq!(c, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn l_update_matches_loop_evaluation() {
        let (m, b, d) = (3usize, 4usize, 2usize);
        let (q, k, _) = qkv::<f64>(7, m * b, d);
        let cfg = MonarchConfig::new(m, b);
        let mut st = init_state(&q, &cfg).unwrap();
        r_update(&mut st, &Tensor3::from_mat_blocks(&k, b).unwrap(), &cfg).unwrap();
        let a_l = st.a_l.clone().unwrap();
        let c_l = st.c_l.clone().unwrap();
        let qb = Tensor3::from_mat_blocks(&permute_bn_rows(&q, b).unwrap(), m).unwrap();
        let l = l_update(&mut st, &qb, &cfg).unwrap();
        for i in 0..b {
            for j in 0..m {
                let logits: Vec<f64> = (0..m)
                    .map(|kk| {
                        let mut s = 0.0;
                        for v in 0..d {
                            s += a_l.get(i, kk, v) * q.get(j * b + i, v);
                        }
                        s - c_l.get(i, kk)
                    })
                    .collect();
                let mx = logits.iter().copied().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|x| (x - mx).exp()).sum();
                for kk in 0..m {
                    assert_abs_diff_eq!(l.get(i, j, kk), (logits[kk] - mx).exp() / z, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn degenerate_shapes_match_dense() {
        let (q, k, v) = qkv::<f64>(8, 10, 4);
        let dense = dense_attention(&q, &k, &v, true).unwrap();
        for (m, b) in [(1, 10), (10, 1)] {
            for t in 1..=3 {
                let (o, _) = monarch_attention(&q, &k, &v, &MonarchConfig::new(m, b).with_iters(t)).unwrap();
                assert!(o.max_abs_diff(&dense.output) < 1e-10, "m={m} b={b} t={t}");
            }
        }
    }

    #[test]
    fn output_equals_materialized_product() {
        let (q, k, v) = qkv::<f64>(9, 48, 5);
        let cfg = MonarchConfig::new(4, 12).exact();
        let (o, f) = monarch_attention(&q, &k, &v, &cfg).unwrap();
        let via_dense = materialize_monarch(&f).unwrap().matmul(&v).unwrap();
        assert!(o.max_abs_diff(&via_dense) < 1e-10);
        assert!(f.max_row_sum_error() < 1e-12);

        let j1 = monarch_objective(
            &monarch_attention(&q, &k, &v, &cfg.with_iters(1)).unwrap().1,
            &q,
            &k,
            true,
        )
        .unwrap();
        let j2 = monarch_objective(&f, &q, &k, true).unwrap();
        assert!(j2 >= j1 - 1e-6 * j1.abs());
    }

    #[test]
    fn fused_matches_blocked() {
        let (q, k, v) = qkv::<f32>(10, 60, 8);
        for cfg in [
            MonarchConfig::new(5, 12),
            MonarchConfig::new(3, 20).with_iters(3),
            MonarchConfig::new(6, 10).with_iters(1).exact(),
        ] {
            let (o_blocked, f) = monarch_attention(&q, &k, &v, &cfg).unwrap();
            let (o_fused, l) = monarch_attention_fused(&q, &k, &v, &cfg, TileConfig::new(7, 5).unwrap()).unwrap();
            assert!(o_blocked.max_abs_diff(&o_fused) < 1e-4);
            assert_eq!(l.dims(), f.l().dims());
        }
    }

    #[test]
    fn block_shift_leaves_r_unchanged() {
        // adding a constant to every score of one block row: scale K so that
        // aR·K shifts by a constant along l via an extra coordinate
        let (q, k, _) = qkv::<f64>(11, 12, 3);
        let cfg = MonarchConfig::new(3, 4);
        let kb = Tensor3::from_mat_blocks(&k, 4).unwrap();
        let mut st = init_state(&q, &cfg).unwrap();
        let r0 = r_update(&mut st, &kb, &cfg).unwrap();

        let q_ext = Mat::from_fn(12, 4, |i, c| if c < 3 { q.get(i, c) } else { 1.0 });
        let k_ext = Mat::from_fn(12, 4, |i, c| if c < 3 { k.get(i, c) } else { 2.5 * (i / 4) as f64 });
        let mut st2 = init_state(&q_ext, &cfg).unwrap();
        let r1 = r_update(&mut st2, &Tensor3::from_mat_blocks(&k_ext, 4).unwrap(), &cfg).unwrap();
        for (a, b) in r0.as_slice().iter().zip(r1.as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn mac_count_matches_formula() {
        let (m, b, d, t) = (4, 6, 3, 2);
        let (q, k, v) = qkv::<f32>(12, m * b, d);
        let cfg = MonarchConfig::new(m, b).with_iters(t);
        let (_, macs) = mac::measure(|| monarch_attention(&q, &k, &v, &cfg).unwrap());
        assert_eq!(macs, expected_macs(m, b, d, t));
        let (_, fused) = mac::measure(|| monarch_attention_fused(&q, &k, &v, &cfg, TileConfig::default()).unwrap());
        assert_eq!(fused, expected_macs(m, b, d, t));
    }

    proptest::proptest! {
        #[test]
        fn factors_stay_row_stochastic(m in 1usize..7, b in 1usize..7, d in 1usize..6, iters in 1usize..4, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = m * b;
            let q = normal_mat::<f64>(&mut rng, n, d).scale(2.0);
            let k = normal_mat::<f64>(&mut rng, n, d);
            let v = normal_mat::<f64>(&mut rng, n, 2);
            let cfg = MonarchConfig::new(m, b).with_iters(iters);
            let (o, f) = monarch_attention(&q, &k, &v, &cfg).unwrap();
            proptest::prop_assert!(f.max_row_sum_error() < 1e-9);
            let a = materialize_monarch(&f).unwrap();
            for i in 0..n {
                let row = a.row(i);
                proptest::prop_assert!(row.iter().all(|&x| x >= 0.0));
                proptest::prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            // outputs are convex combinations of value rows
            for c in 0..2 {
                let (lo, hi) = (0..n).map(|j| v.get(j, c)).fold((f64::MAX, f64::MIN), |(l, h), x| (l.min(x), h.max(x)));
                for i in 0..n {
                    proptest::prop_assert!(o.get(i, c) >= lo - 1e-9 && o.get(i, c) <= hi + 1e-9);
                }
            }
        }
    }
}
