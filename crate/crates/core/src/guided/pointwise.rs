use crate::error::{shape_err, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{Mask, Shape, Tensor};

fn active_pixels<T: Scalar>(mask: &[T]) -> Vec<usize> {
    (0..mask.len()).filter(|&i| mask[i] == T::one()).collect()
}

fn check<T: Scalar>(x: Shape, mask: &Mask<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    mask.check_matches(x)?;
    let ws = weight.shape();
    if ws.h != 1 || ws.w != 1 || ws.c != x.c || ws.n != x.c {
        return shape_err(format!(
            "sparse point-wise weights must be {0}x{0}x1x1 for {x}, got {ws}",
            x.c
        ));
    }
    if bias.shape() != Shape::new(1, ws.n, 1, 1) {
        return shape_err(format!("sparse point-wise bias shape {}", bias.shape()));
    }
    Ok(())
}

/// Fully connected channel mixing applied only at masked pixels; clean
/// pixels are copied through unchanged. Returns the output and MAC count.
pub(crate) fn pointwise_forward<T: Scalar>(
    x: &Tensor<T>,
    mask: &Mask<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, u64)> {
    check(x.shape(), mask, weight, bias)?;
    let s = x.shape();
    let (c, plane) = (s.c, s.plane());
    let mut out = x.clone();
    let mut macs = 0u64;
    let mut a = Vec::new();
    for n in 0..s.n {
        let active = active_pixels(mask.sample(n));
        if active.is_empty() {
            continue;
        }
        let p = active.len();
        macs += (p * c * c) as u64;
        let src = x.sample(n);
        a.clear();
        for &pix in &active {
            a.extend((0..c).map(|ci| src[ci * plane + pix]));
        }
        let mut y = vec![T::zero(); p * c];
        gemm(p, c, c, T::one(), &a, false, weight.data(), true, T::zero(), &mut y);
        let dst = out.sample_mut(n);
        for (i, &pix) in active.iter().enumerate() {
            for co in 0..c {
                dst[co * plane + pix] = y[i * c + co] + bias.data()[co];
            }
        }
    }
    Ok((out, macs))
}

pub(crate) fn pointwise_backward<T: Scalar>(
    x: &Tensor<T>,
    mask: &Mask<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let (c, plane) = (s.c, s.plane());
    let mut d_x = grad_out.clone();
    let mut d_w = Tensor::zeros(weight.shape());
    let mut d_b = Tensor::zeros(Shape::new(1, c, 1, 1));
    let mut a = Vec::new();
    let mut gy = Vec::new();
    for n in 0..s.n {
        let active = active_pixels(mask.sample(n));
        if active.is_empty() {
            continue;
        }
        let p = active.len();
        let src = x.sample(n);
        let g = grad_out.sample(n);
        a.clear();
        gy.clear();
        for &pix in &active {
            a.extend((0..c).map(|ci| src[ci * plane + pix]));
            gy.extend((0..c).map(|co| g[co * plane + pix]));
        }
        for row in gy.chunks(c) {
            for (db, &v) in d_b.data_mut().iter_mut().zip(row) {
                *db += v;
            }
        }
        // dW (c_out x c_in) += GY^T (c_out x p) * A (p x c_in)
        gemm(c, p, c, T::one(), &gy, true, &a, false, T::one(), d_w.data_mut());
        let mut da = vec![T::zero(); p * c];
        gemm(p, c, c, T::one(), &gy, false, weight.data(), false, T::zero(), &mut da);
        let dst = d_x.sample_mut(n);
        for (i, &pix) in active.iter().enumerate() {
            for ci in 0..c {
                dst[ci * plane + pix] = da[i * c + ci];
            }
        }
    }
    (d_x, d_w, d_b)
}

/// Sparse 1x1 convolution: at `M = 1` the channel vector becomes
/// `weight * f + bias`, at `M = 0` it is passed through.
///
/// `weight` is `(c, c, 1, 1)` and `bias` is `(1, c, 1, 1)`.
pub fn sparse_pointwise<T: Scalar>(
    features: &Tensor<T>,
    mask: &Mask<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(pointwise_forward(features, mask, weight, bias)?.0)
}

/// MAC count of [`sparse_pointwise`].
pub fn sparse_pointwise_macs<T: Scalar>(mask: &Mask<T>, channels: usize) -> u64 {
    (mask.count() * channels * channels) as u64
}
