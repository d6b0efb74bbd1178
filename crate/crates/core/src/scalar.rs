use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type of tensors: `f32` for training, `f64` for
/// oracle and gradient verification work.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    /// Checkpoint dtype code.
    const DTYPE_CODE: u8;
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// The pointers must describe valid `m x k`, `k x n` and `m x n` matrices
    /// under the given strides, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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

    fn to_le_bytes_vec(data: &[Self]) -> Vec<u8>;
    fn from_le_chunk(chunk: &[u8]) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const DTYPE_CODE: u8 = 1;
    const NAME: &'static str = "f32";

    unsafe fn gemm(
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

    fn to_le_bytes_vec(data: &[f32]) -> Vec<u8> {
        data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_chunk(chunk: &[u8]) -> f32 {
        f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"))
    }
}

impl Scalar for f64 {
    const DTYPE_CODE: u8 = 2;
    const NAME: &'static str = "f64";

    unsafe fn gemm(
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

    fn to_le_bytes_vec(data: &[f64]) -> Vec<u8> {
        data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_chunk(chunk: &[u8]) -> f64 {
        f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"))
    }
}

/// Row-major GEMM on contiguous slices: `c = alpha * op(a) * op(b) + beta * c`.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k`
/// when `trans_b`), `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; `c` is a distinct mutable borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
