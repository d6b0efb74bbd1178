//! Unmasked global (non-local) attention over all `h * w` positions. Only
//! used by the ablation variant that swaps the guided attention for a
//! conventional non-local layer.

use crate::error::{shape_err, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::stats::softmax_in_place;
use crate::tensor::{Shape, Tensor};

fn check(q: Shape, k: Shape, v: Shape) -> Result<()> {
    if q != k || (v.n, v.h, v.w) != (q.n, q.h, q.w) {
        return shape_err(format!("attention operands q={q} k={k} v={v}"));
    }
    Ok(())
}

fn attention_matrix<T: Scalar>(q: &[T], k: &[T], c: usize, p: usize) -> Vec<T> {
    // A (p x p) = Q^T (p x c) * K (c x p), softmax over each row
    let mut a = vec![T::zero(); p * p];
    gemm(p, c, p, T::one(), q, true, k, false, T::zero(), &mut a);
    for row in a.chunks_mut(p) {
        softmax_in_place(row);
    }
    a
}

/// `out_p = sum_s softmax_s(<q_p, k_s>) v_s` per sample.
pub(crate) fn attention_forward<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    check(q.shape(), k.shape(), v.shape())?;
    let (qs, vs) = (q.shape(), v.shape());
    let p = qs.plane();
    let mut out = Tensor::zeros(vs);
    for n in 0..qs.n {
        let a = attention_matrix(q.sample(n), k.sample(n), qs.c, p);
        // out (cv x p) = V (cv x p) * A^T
        gemm(vs.c, p, p, T::one(), v.sample(n), false, &a, true, T::zero(), out.sample_mut(n));
    }
    Ok(out)
}

pub(crate) fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (qs, vs) = (q.shape(), v.shape());
    let (c, p) = (qs.c, qs.plane());
    let mut dq = Tensor::zeros(qs);
    let mut dk = Tensor::zeros(qs);
    let mut dv = Tensor::zeros(vs);
    for n in 0..qs.n {
        let a = attention_matrix(q.sample(n), k.sample(n), c, p);
        let g = grad_out.sample(n);
        // dV = G * A
        gemm(vs.c, p, p, T::one(), g, false, &a, false, T::zero(), dv.sample_mut(n));
        // dA = G^T * V  (p x p)
        let mut da = vec![T::zero(); p * p];
        gemm(p, vs.c, p, T::one(), g, true, v.sample(n), false, T::zero(), &mut da);
        for (arow, drow) in a.chunks(p).zip(da.chunks_mut(p)) {
            let dotv = arow.iter().zip(drow.iter()).fold(T::zero(), |s, (&x, &y)| s + x * y);
            for (d, &x) in drow.iter_mut().zip(arow) {
                *d = x * (*d - dotv);
            }
        }
        // dQ = K * dS^T, dK = Q * dS
        gemm(c, p, p, T::one(), k.sample(n), false, &da, true, T::zero(), dq.sample_mut(n));
        gemm(c, p, p, T::one(), q.sample(n), false, &da, false, T::zero(), dk.sample_mut(n));
    }
    (dq, dk, dv)
}
