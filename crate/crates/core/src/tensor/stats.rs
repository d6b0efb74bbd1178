use super::{Mask, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Variance floor added under the square root of masked standard deviations.
pub const STATS_EPS: f64 = 1e-5;

/// Per-`(sample, channel)` statistics, indexed `n * c + channel`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats<T> {
    pub channels: usize,
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Copy> ChannelStats<T> {
    pub fn mean_at(&self, n: usize, c: usize) -> T {
        self.mean[n * self.channels + c]
    }

    pub fn std_at(&self, n: usize, c: usize) -> T {
        self.std[n * self.channels + c]
    }
}

/// Masked mean and standard deviation of a single plane.
///
/// `std = sqrt(E_M[q^2] - E_M[q]^2 + eps)`. Returns `None` when the mask
/// selects nothing.
pub(crate) fn plane_stats<T: Scalar>(plane: &[T], mask: &[T]) -> Option<(T, T, T)> {
    let mut count = T::zero();
    let mut sum = T::zero();
    let mut sum_sq = T::zero();
    for (&q, &m) in plane.iter().zip(mask) {
        count += m;
        sum += q * m;
        sum_sq += q * q * m;
    }
    if count == T::zero() {
        return None;
    }
    let mean = sum / count;
    let var = (sum_sq / count - mean * mean).max(T::zero());
    Some((count, mean, (var + T::lit(STATS_EPS)).sqrt()))
}

/// Per-channel masked mean and standard deviation over the pixels where the
/// mask is 1.
pub fn masked_stats<T: Scalar>(input: &Tensor<T>, mask: &Mask<T>) -> Result<ChannelStats<T>> {
    let s = input.shape();
    mask.check_matches(s)?;
    let plane = s.plane();
    let mut mean = Vec::with_capacity(s.n * s.c);
    let mut std = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        let m = mask.sample(n);
        for (c, q) in input.sample(n).chunks(plane).enumerate() {
            let (_, mu, sigma) = plane_stats(q, m).ok_or(Error::EmptyRegion)?;
            debug_assert!(c < s.c);
            mean.push(mu);
            std.push(sigma);
        }
    }
    Ok(ChannelStats {
        channels: s.c,
        mean,
        std,
    })
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Scalar>(scores: &[T]) -> Result<Vec<T>> {
    if scores.is_empty() {
        return Err(Error::EmptySoftmax);
    }
    let mut out = scores.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut total = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}
