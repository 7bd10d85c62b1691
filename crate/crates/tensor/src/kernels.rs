//! Dense row-major kernels shared by forward and backward passes.
//!
//! All `gemm_*` routines accumulate into `c`; callers zero it first when a
//! plain product is wanted. Inner loops run over contiguous slices so the
//! compiler can vectorize them.

use crate::tensor::Scalar;

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..n {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * *xv;
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds asserted above; `c` is a unique borrow.
    unsafe {
        T::gemm_raw(m, k, n, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, c.as_mut_ptr(), n as isize)
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    // SAFETY: as in `gemm_nn`; `b` is read transposed through its strides.
    unsafe {
        T::gemm_raw(m, k, n, a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, c.as_mut_ptr(), n as isize)
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n);
    // SAFETY: as in `gemm_nn`; `a` is read transposed through its strides.
    unsafe {
        T::gemm_raw(k, m, n, a.as_ptr(), 1, k as isize, b.as_ptr(), n as isize, 1, c.as_mut_ptr(), n as isize)
    }
}

pub fn transpose<T: Scalar>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    let inv = T::one() / sum;
    for x in row.iter_mut() {
        *x = *x * inv;
    }
}

/// Tanh approximation of GELU:
/// `0.5 x (1 + tanh(√(2/π) (x + 0.044715 x³)))`.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let k = T::of(0.797_884_560_802_865_4);
    let c = T::of(0.044_715);
    T::of(0.5) * x * (T::one() + tanh(k * (x + c * x * x * x)))
}

/// `tanh` through a single `exp`, several times cheaper than the libm
/// routine; absolute error stays at rounding level.
#[inline]
pub fn tanh<T: Scalar>(x: T) -> T {
    T::one() - T::of(2.0) / ((x + x).exp() + T::one())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::of(0.797_884_560_802_865_4);
    let c = T::of(0.044_715);
    let t = tanh(k * (x + c * x * x * x));
    T::of(0.5) * (T::one() + t)
        + T::of(0.5) * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}
