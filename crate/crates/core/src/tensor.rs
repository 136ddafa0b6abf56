//! Dense row-major containers, the reshape-transpose permutation, and the
//! row-wise softmax / entropy primitives shared by every kernel.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{dim_err, Error, Result};
use crate::mac;

/// On-disk element tag used by the MATN format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Scalar type the kernels are generic over: `f32` for kernel paths,
/// `f64` for oracle paths and gradient checks.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: DType;

    fn of_f64(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Raw row-major GEMM, `C = alpha * op(A) * op(B) + beta * C`.
    ///
    /// # Safety
    /// Strides must keep every access inside the buffers behind the pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn of_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn of_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Operand orientation for [`gemm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Op {
    N,
    T,
}

/// Row-major `C[m×n] = op(A) · op(B) + beta · C` with leading dimensions
/// `lda`, `ldb`, `ldc`. Every call adds `m·n·k` to the MAC counter.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    op_a: Op,
    op_b: Op,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    lda: usize,
    b: &[T],
    ldb: usize,
    beta: T,
    c: &mut [T],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for row in c.chunks_mut(ldc).take(m) {
            for x in &mut row[..n] {
                *x = *x * beta;
            }
        }
        return;
    }
    let (rsa, csa, a_need) = match op_a {
        Op::N => (lda, 1, (m - 1) * lda + k),
        Op::T => (1, lda, (k - 1) * lda + m),
    };
    let (rsb, csb, b_need) = match op_b {
        Op::N => (ldb, 1, (k - 1) * ldb + n),
        Op::T => (1, ldb, (n - 1) * ldb + k),
    };
    assert!(a.len() >= a_need, "gemm: A too short");
    assert!(b.len() >= b_need, "gemm: B too short");
    assert!(c.len() >= (m - 1) * ldc + n, "gemm: C too short");
    mac::add((m * n * k) as u64);
    // SAFETY: bounds checked above for the row-major strides chosen.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Element> Mat<T> {
    /// Builds a matrix from external data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(dim_err!(
                "data length {} != {rows}x{cols}",
                data.len()
            ));
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Rows `[start, end)` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Mat<T> {
        Mat::from_raw(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    pub fn scale(&self, s: T) -> Mat<T> {
        Mat::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|&x| x * s).collect(),
        )
    }

    pub fn transpose(&self) -> Mat<T> {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn cast<U: Element>(&self) -> Mat<U> {
        Mat::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|&x| U::of_f64(x.as_f64())).collect(),
        )
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Mat<T>) -> Result<Mat<T>> {
        if self.cols != rhs.rows {
            return Err(dim_err!(
                "matmul {}x{} by {}x{}",
                self.rows,
                self.cols,
                rhs.rows,
                rhs.cols
            ));
        }
        let mut out = Mat::zeros(self.rows, rhs.cols);
        gemm(
            Op::N,
            Op::N,
            self.rows,
            rhs.cols,
            self.cols,
            &self.data,
            self.cols,
            &rhs.data,
            rhs.cols,
            T::zero(),
            &mut out.data,
            rhs.cols,
        );
        Ok(out)
    }

    /// Largest elementwise `|self - other|`, evaluated in f64.
    pub fn max_abs_diff<U: Element>(&self, other: &Mat<U>) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius(&self) -> f64 {
        self.data
            .iter()
            .map(|&x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(index) => Err(Error::Domain(format!(
                "{what} has a non-finite entry at flat index {index}"
            ))),
            None => Ok(()),
        }
    }
}

/// Dense row-major rank-3 tensor of shape `(d0, d1, d2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Element> Tensor3<T> {
    pub fn from_vec(d0: usize, d1: usize, d2: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != d0 * d1 * d2 {
            return Err(dim_err!(
                "data length {} != {d0}x{d1}x{d2}",
                data.len()
            ));
        }
        Ok(Self {
            dims: [d0, d1, d2],
            data,
        })
    }

    pub fn zeros(d0: usize, d1: usize, d2: usize) -> Self {
        Self {
            dims: [d0, d1, d2],
            data: vec![T::zero(); d0 * d1 * d2],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        let [_, d1, d2] = self.dims;
        self.data[(i * d1 + j) * d2 + k]
    }

    /// The contiguous `d1 × d2` slab at leading index `i`.
    pub fn block(&self, i: usize) -> &[T] {
        let s = self.dims[1] * self.dims[2];
        &self.data[i * s..(i + 1) * s]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut [T] {
        let s = self.dims[1] * self.dims[2];
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn block_mat(&self, i: usize) -> Mat<T> {
        Mat::from_raw(self.dims[1], self.dims[2], self.block(i).to_vec())
    }

    /// The row `(i, j, ·)`.
    pub fn fiber(&self, i: usize, j: usize) -> &[T] {
        let [_, d1, d2] = self.dims;
        let at = (i * d1 + j) * d2;
        &self.data[at..at + d2]
    }

    pub(crate) fn fiber_mut(&mut self, i: usize, j: usize) -> &mut [T] {
        let [_, d1, d2] = self.dims;
        let at = (i * d1 + j) * d2;
        &mut self.data[at..at + d2]
    }

    /// Swaps the two leading axes: `(d0, d1, d2) -> (d1, d0, d2)`.
    pub fn swap_leading(&self) -> Tensor3<T> {
        let [d0, d1, d2] = self.dims;
        let mut out = Tensor3::zeros(d1, d0, d2);
        for i in 0..d0 {
            for j in 0..d1 {
                out.fiber_mut(j, i).copy_from_slice(self.fiber(i, j));
            }
        }
        out
    }

    /// Reinterprets an `n × d` matrix as `(n / rows_per_block, rows_per_block, d)`.
    pub fn from_mat_blocks(mat: &Mat<T>, rows_per_block: usize) -> Result<Self> {
        if rows_per_block == 0 || !mat.rows().is_multiple_of(rows_per_block) {
            return Err(dim_err!(
                "{} rows cannot be split into blocks of {rows_per_block}",
                mat.rows()
            ));
        }
        Tensor3::from_vec(
            mat.rows() / rows_per_block,
            rows_per_block,
            mat.cols(),
            mat.as_slice().to_vec(),
        )
    }
}

/// The reshape-transpose permutation `P_(b,n)`: reshape a length-`n` sequence
/// into `m × b` row-major, transpose, flatten.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Perm {
    b: usize,
    n: usize,
    /// `output[p] = input[forward[p]]`.
    forward: Vec<usize>,
}

impl Perm {
    pub fn new(b: usize, n: usize) -> Result<Self> {
        if b == 0 || !n.is_multiple_of(b) {
            return Err(dim_err!("length {n} is not divisible by block width {b}"));
        }
        let m = n / b;
        // position i*m + j of the transposed b×m grid holds element (j, i) of the m×b grid
        let mut forward = Vec::with_capacity(n);
        for i in 0..b {
            for j in 0..m {
                forward.push(j * b + i);
            }
        }
        Ok(Self { b, n, forward })
    }

    pub fn b(&self) -> usize {
        self.b
    }

    pub fn m(&self) -> usize {
        if self.b == 0 {
            0
        } else {
            self.n / self.b
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn forward_index(&self) -> &[usize] {
        &self.forward
    }

    /// The inverse map; equals `Perm::new(n / b, n)`.
    pub fn inverse(&self) -> Perm {
        let mut inv = vec![0; self.n];
        for (p, &src) in self.forward.iter().enumerate() {
            inv[src] = p;
        }
        Perm {
            b: self.m(),
            n: self.n,
            forward: inv,
        }
    }

    pub fn apply<T: Copy>(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.n {
            return Err(dim_err!(
                "permutation of length {} applied to length {}",
                self.n,
                v.len()
            ));
        }
        Ok(self.forward.iter().map(|&s| v[s]).collect())
    }

    pub fn apply_rows<T: Element>(&self, mat: &Mat<T>) -> Result<Mat<T>> {
        if mat.rows() != self.n {
            return Err(dim_err!(
                "permutation of length {} applied to {} rows",
                self.n,
                mat.rows()
            ));
        }
        let d = mat.cols();
        let mut data = Vec::with_capacity(self.n * d);
        for &s in &self.forward {
            data.extend_from_slice(mat.row(s));
        }
        Ok(Mat::from_raw(self.n, d, data))
    }

    /// The 0/1 matrix `P` with `P v = apply(v)`.
    pub fn to_matrix<T: Element>(&self) -> Mat<T> {
        let mut p = Mat::zeros(self.n, self.n);
        for (row, &col) in self.forward.iter().enumerate() {
            p.set(row, col, T::one());
        }
        p
    }
}

/// Applies `P_(b,n)` to a vector.
pub fn permute_bn<T: Copy>(v: &[T], b: usize) -> Result<Vec<T>> {
    Perm::new(b, v.len())?.apply(v)
}

/// Applies `P_(b,n)` to the rows of an `n`-row matrix.
pub fn permute_bn_rows<T: Element>(mat: &Mat<T>, b: usize) -> Result<Mat<T>> {
    Perm::new(b, mat.rows())?.apply_rows(mat)
}

/// In-place, max-shifted softmax. Caller guarantees a non-empty slice.
pub(crate) fn softmax_in_place<T: Element>(x: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = sum.recip();
    for v in x.iter_mut() {
        *v = *v * inv;
    }
}

/// `p log p` with `0 log 0 = 0`.
#[inline]
pub(crate) fn xlogx<T: Element>(p: T) -> T {
    if p > T::zero() {
        p * p.ln()
    } else {
        T::zero()
    }
}

pub fn row_softmax<T: Element>(x: &[T]) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(dim_err!("softmax of an empty vector"));
    }
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Shannon entropy in nats of a probability vector.
pub fn row_entropy<T: Element>(p: &[T]) -> Result<T> {
    if let Some(i) = p.iter().position(|&v| v < T::zero() || v.is_nan()) {
        return Err(Error::Domain(format!(
            "probability entry {i} is {} (must be in [0, 1])",
            p[i]
        )));
    }
    Ok(-p.iter().fold(T::zero(), |acc, &v| acc + xlogx(v)))
}
