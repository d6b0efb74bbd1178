//! Spatial feature modulation: features at degraded pixels are re-normalized
//! so that their per-channel mean and standard deviation match those of the
//! clean pixels of the same sample. Clean pixels are left untouched.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::stats::plane_stats;
use crate::tensor::{Mask, Tensor};

struct RegionStats<T> {
    n_deg: T,
    mu_deg: T,
    sd_deg: T,
    n_clean: T,
    mu_clean: T,
    sd_clean: T,
}

fn region_stats<T: Scalar>(plane: &[T], mask: &[T], clean: &[T]) -> Option<RegionStats<T>> {
    let (n_deg, mu_deg, sd_deg) = plane_stats(plane, mask)?;
    let (n_clean, mu_clean, sd_clean) = plane_stats(plane, clean)?;
    Some(RegionStats {
        n_deg,
        mu_deg,
        sd_deg,
        n_clean,
        mu_clean,
        sd_clean,
    })
}

/// Modulate already-fused features `x` under `mask`.
pub(crate) fn sfm_forward<T: Scalar>(x: &Tensor<T>, mask: &Mask<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    mask.check_matches(s)?;
    let plane = s.plane();
    let mut out = x.clone();
    for n in 0..s.n {
        let m = mask.sample(n);
        let clean: Vec<T> = m.iter().map(|&v| T::one() - v).collect();
        let dst = out.sample_mut(n);
        for c in 0..s.c {
            let q = &x.sample(n)[c * plane..(c + 1) * plane];
            let Some(st) = region_stats(q, m, &clean) else {
                break;
            };
            let scale = st.sd_clean / st.sd_deg;
            for (i, o) in dst[c * plane..(c + 1) * plane].iter_mut().enumerate() {
                if m[i] == T::one() {
                    *o = scale * (q[i] - st.mu_deg) + st.mu_clean;
                }
            }
        }
    }
    Ok(out)
}

/// Input gradient of [`sfm_forward`], differentiating through the statistics
/// of both regions.
pub(crate) fn sfm_backward<T: Scalar>(x: &Tensor<T>, mask: &Mask<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let mut dx = grad_out.clone();
    for n in 0..s.n {
        let m = mask.sample(n);
        let clean: Vec<T> = m.iter().map(|&v| T::one() - v).collect();
        let xs = x.sample(n);
        let gs = grad_out.sample(n);
        let dst = dx.sample_mut(n);
        for c in 0..s.c {
            let range = c * plane..(c + 1) * plane;
            let q = &xs[range.clone()];
            let g = &gs[range.clone()];
            let Some(st) = region_stats(q, m, &clean) else {
                break;
            };
            // z = normalized degraded value; y_deg = sd_clean * z + mu_clean
            let mut sum_g = T::zero();
            let mut sum_gz = T::zero();
            for i in 0..plane {
                if m[i] == T::one() {
                    let z = (q[i] - st.mu_deg) / st.sd_deg;
                    sum_g += g[i];
                    sum_gz += g[i] * z;
                }
            }
            let scale = st.sd_clean / st.sd_deg;
            let mean_g = sum_g / st.n_deg;
            let mean_gz = sum_gz / st.n_deg;
            let d = &mut dst[range];
            for i in 0..plane {
                if m[i] == T::one() {
                    let z = (q[i] - st.mu_deg) / st.sd_deg;
                    d[i] = scale * (g[i] - mean_g - z * mean_gz);
                } else {
                    // clean pixels: identity path plus their effect on the clean statistics
                    let d_sd = (q[i] - st.mu_clean) / (st.n_clean * st.sd_clean);
                    d[i] = g[i] + sum_g / st.n_clean + sum_gz * d_sd;
                }
            }
        }
    }
    dx
}

/// Additively fuse `features` with the localization features `loc` and
/// modulate the degraded region's statistics towards the clean region's.
///
/// Returns `features + loc` unchanged when either region is empty.
pub fn sfm_modulate<T: Scalar>(features: &Tensor<T>, loc: &Tensor<T>, mask: &Mask<T>) -> Result<Tensor<T>> {
    let fused = features.add(loc)?;
    sfm_forward(&fused, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn row_maps_degraded_stats_onto_clean_stats() {
        let f = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let zero = Tensor::zeros(f.shape());
        let m = Mask::from_vec(1, 1, 4, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let y = sfm_modulate(&f, &zero, &m).unwrap();
        let expect = [3.0, 4.0, 3.0, 4.0];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn empty_degraded_region_is_plain_fusion() {
        let f = Tensor::from_fn(Shape::new(1, 2, 3, 3), |_, c, y, x| (c + y * x) as f64);
        let loc = Tensor::full(f.shape(), 0.25);
        let m = Mask::zeros(1, 3, 3);
        assert_eq!(sfm_modulate(&f, &loc, &m).unwrap(), f.add(&loc).unwrap());
    }

    #[test]
    fn full_mask_is_plain_fusion() {
        let f = Tensor::from_fn(Shape::new(1, 1, 2, 2), |_, _, y, x| (y + 2 * x) as f64);
        let m = Mask::ones(1, 2, 2);
        let zero = Tensor::zeros(f.shape());
        assert_eq!(sfm_modulate(&f, &zero, &m).unwrap(), f);
    }
}
