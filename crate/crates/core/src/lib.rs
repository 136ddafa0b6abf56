//! Monarch-factorized attention for spatio-temporal token grids.
//!
//! The attention map of an `N = T·H·W` token video is approximated by a
//! Monarch matrix whose two block-diagonal factors act within frames
//! (`R`, `T` blocks of `HW × HW`) and across frames (`L`, `HW` blocks of
//! `T × T`). The factors are found by alternating maximization of
//! `⟨A, QKᵀ⟩ + H(A)`, one exact softmax per half-step, at
//! `O(t·N·(T + HW)·d)` cost instead of `O(N²·d)`.
//!
//! | module | contents |
//! |--------|----------|
//! | [`tensor`] | [`Mat`], [`Tensor3`], the reshape-transpose [`Perm`], softmax / entropy |
//! | [`flash`] | tiled attention with fused online entropy, forward and backward |
//! | [`monarch`] | R/L updates, the iteration driver, blocked and fused variants |
//! | [`video`] | token grids, first-frame recomputation, sparsity and FLOPs |
//! | [`oracle`] | dense f64 ground truth for all of the above |
//! | [`matn`] | the MATN binary tensor format |
//! | [`bench`] | the benchmark harness behind `vmonarch-bench` |
//!
//! ```
//! use vmonarch::{monarch_attention, oracle, Mat, MonarchConfig};
//!
//! let n = 12;
//! let q = Mat::from_fn(n, 4, |i, j| ((i * 7 + j) % 5) as f64 * 0.3);
//! let k = Mat::from_fn(n, 4, |i, j| ((i * 3 + j) % 4) as f64 * 0.2);
//! let v = Mat::from_fn(n, 4, |i, j| (i + j) as f64);
//!
//! // b = 1 degenerates to exact attention.
//! let (o, _) = monarch_attention(&q, &k, &v, &MonarchConfig::new(n, 1)).unwrap();
//! let dense = oracle::dense_attention(&q, &k, &v, true).unwrap();
//! assert!(o.max_abs_diff(&dense.output) < 1e-10);
//! ```

pub mod bench;
pub mod error;
pub mod flash;
pub mod mac;
pub mod matn;
pub mod monarch;
pub mod oracle;
pub mod tensor;
pub mod video;
pub mod workload;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use flash::{flash_entropy_bwd, flash_entropy_fwd, FlashGrads, FlashOutput, StreamRowState, TileConfig};
pub use monarch::{
    init_state, l_update, monarch_attention, monarch_attention_fused, r_update, IterState,
    MonarchConfig, MonarchFactors,
};
pub use tensor::{permute_bn, permute_bn_rows, row_entropy, row_softmax, DType, Element, Mat, Perm, Tensor3};
pub use video::{
    factorize, flops_estimate, sparsity_estimate, vmonarch_attention, vmonarch_attention_head,
    CostReport, MonarchKernel, TokenGrid, VMonarchConfig,
};
