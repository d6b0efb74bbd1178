//! Image quality (PSNR, SSIM), mask quality and the PSNR/SSIM to error
//! reduction translation.

use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Mask, Shape, Tensor};

/// Reported instead of infinity when two images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Sum of squared errors and number of compared values, optionally
/// restricted to the pixels selected by `region` (all channels).
fn sse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, region: Option<&Mask<T>>) -> Result<(f64, usize)> {
    a.check_same_shape(b, "psnr")?;
    let s = a.shape();
    let plane = s.plane();
    if let Some(m) = region {
        m.check_matches(s)?;
        if m.count() == 0 {
            return Err(Error::EmptyRegion);
        }
    }
    let mut total = 0.0;
    let mut count = 0;
    for n in 0..s.n {
        let (x, y) = (a.sample(n), b.sample(n));
        let m = region.map(|m| m.sample(n));
        for (i, (&p, &q)) in x.iter().zip(y).enumerate() {
            if m.is_none_or(|m| m[i % plane] == T::one()) {
                let d = p.as_f64() - q.as_f64();
                total += d * d;
                count += 1;
            }
        }
    }
    Ok((total, count))
}

/// Mean squared error over all values, or over the pixels of `region`.
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, region: Option<&Mask<T>>) -> Result<f64> {
    let (s, n) = sse(a, b, region)?;
    Ok(s / n as f64)
}

/// `10 log10(peak^2 / MSE)`; identical inputs give [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64, region: Option<&Mask<T>>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b, region)?, peak))
}

/// Luma `Y = 0.299 R + 0.587 G + 0.114 B` of an RGB tensor, shape `(n, 1, h, w)`.
pub fn to_luma<T: Scalar>(rgb: &Tensor<T>) -> Result<Tensor<T>> {
    let s = rgb.shape();
    if s.c != 3 {
        return shape_err(format!("luma needs 3 channels, got {s}"));
    }
    let plane = s.plane();
    let (wr, wg, wb) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
    let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
    for n in 0..s.n {
        let src = rgb.sample(n);
        for (p, v) in out.sample_mut(n).iter_mut().enumerate() {
            *v = wr * src[p] + wg * src[plane + p] + wb * src[2 * plane + p];
        }
    }
    Ok(out)
}

/// PSNR on the luma channel.
pub fn psnr_y<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64, region: Option<&Mask<T>>) -> Result<f64> {
    psnr(&to_luma(a)?, &to_luma(b)?, peak, region)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..k).map(|i| g[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..k).map(|i| g[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Mean local SSIM over all valid 11x11 Gaussian windows (sigma 1.5),
/// averaged over channels and samples, for peak value 1.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.check_same_shape(b, "ssim")?;
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            s.h, s.w
        )));
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let plane = s.plane();
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..s.n {
        for c in 0..s.c {
            let off = c * plane;
            let x: Vec<f64> = a.sample(n)[off..off + plane].iter().map(|v| v.as_f64()).collect();
            let y: Vec<f64> = b.sample(n)[off..off + plane].iter().map(|v| v.as_f64()).collect();
            let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
            let mx = filter_valid(&x, s.h, s.w, &g);
            let my = filter_valid(&y, s.h, s.w, &g);
            let sxx = filter_valid(&prod(&x, &x), s.h, s.w, &g);
            let syy = filter_valid(&prod(&y, &y), s.h, s.w, &g);
            let sxy = filter_valid(&prod(&x, &y), s.h, s.w, &g);
            for i in 0..mx.len() {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cov = sxy[i] - ux * uy;
                total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// RMSE implied by a PSNR at peak 1.
pub fn rmse_from_psnr(psnr_db: f64) -> f64 {
    10f64.powf(-psnr_db / 10.0).sqrt()
}

/// `(1 - SSIM) / 2`.
pub fn dssim(ssim: f64) -> f64 {
    (1.0 - ssim) / 2.0
}

/// Relative reductions, in percent, of RMSE and DSSIM achieved by a method
/// over a reference: `100 * (1 - method / reference)`.
pub fn error_reduction(psnr_ref: f64, psnr_method: f64, ssim_ref: f64, ssim_method: f64) -> (f64, f64) {
    let rmse = 100.0 * (1.0 - rmse_from_psnr(psnr_method) / rmse_from_psnr(psnr_ref));
    let d = 100.0 * (1.0 - dssim(ssim_method) / dssim(ssim_ref));
    (rmse, d)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 of a predicted mask. An empty prediction has
/// precision 0 unless the ground truth is empty too (then 1); recall of an
/// empty ground truth is 1.
pub fn mask_prf<T: Scalar>(pred: &Mask<T>, gt: &Mask<T>) -> Result<MaskScores> {
    if (pred.n(), pred.h(), pred.w()) != (gt.n(), gt.h(), gt.w()) {
        return shape_err(format!(
            "mask shapes differ: {}x{}x{} vs {}x{}x{}",
            pred.n(),
            pred.h(),
            pred.w(),
            gt.n(),
            gt.h(),
            gt.w()
        ));
    }
    let one = T::one();
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p == one, g == one) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let gt_empty = tp + fn_ == 0;
    let precision = if tp + fp == 0 {
        if gt_empty {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if gt_empty { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MaskScores { precision, recall, f1 })
}

/// Per-image quality summary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityReport {
    pub psnr_db: f64,
    pub ssim: f64,
    /// `None` when the region is empty.
    pub psnr_clean_region_db: Option<f64>,
    pub psnr_degraded_region_db: Option<f64>,
    pub mask: Option<MaskScores>,
}

fn region_psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, m: &Mask<T>) -> Result<Option<f64>> {
    match psnr(a, b, 1.0, Some(m)) {
        Ok(v) => Ok(Some(v)),
        Err(Error::EmptyRegion) => Ok(None),
        Err(e) => Err(e),
    }
}

impl QualityReport {
    /// Compare `restored` with `clean`. Region PSNRs use `gt_mask`; mask
    /// scores are filled in when a predicted mask is given.
    pub fn evaluate<T: Scalar>(
        restored: &Tensor<T>,
        clean: &Tensor<T>,
        gt_mask: &Mask<T>,
        pred_mask: Option<&Mask<T>>,
    ) -> Result<Self> {
        Ok(Self {
            psnr_db: psnr(restored, clean, 1.0, None)?,
            ssim: ssim(restored, clean)?,
            psnr_clean_region_db: region_psnr(restored, clean, &gt_mask.complement())?,
            psnr_degraded_region_db: region_psnr(restored, clean, gt_mask)?,
            mask: pred_mask.map(|p| mask_prf(p, gt_mask)).transpose()?,
        })
    }

    /// One `sample=<idx> psnr=.. ssim=.. psnr_clean=.. psnr_deg=.. f1=..`
    /// record; missing values print as `nan`.
    pub fn line(&self, idx: usize) -> String {
        let opt = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.4}"));
        format!(
            "sample={idx} psnr={:.4} ssim={:.5} psnr_clean={} psnr_deg={} f1={}",
            self.psnr_db,
            self.ssim,
            opt(self.psnr_clean_region_db),
            opt(self.psnr_degraded_region_db),
            opt(self.mask.map(|m| m.f1)),
        )
    }
}

/// Mean of each field over a set of reports, skipping missing values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualitySummary {
    pub count: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub psnr_clean_region_db: f64,
    pub psnr_degraded_region_db: f64,
    pub f1: f64,
}

impl QualitySummary {
    pub fn of(reports: &[QualityReport]) -> Self {
        let mean = |vals: Vec<f64>| {
            if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        Self {
            count: reports.len(),
            psnr_db: mean(reports.iter().map(|r| r.psnr_db).collect()),
            ssim: mean(reports.iter().map(|r| r.ssim).collect()),
            psnr_clean_region_db: mean(reports.iter().filter_map(|r| r.psnr_clean_region_db).collect()),
            psnr_degraded_region_db: mean(reports.iter().filter_map(|r| r.psnr_degraded_region_db).collect()),
            f1: mean(reports.iter().filter_map(|r| r.mask.map(|m| m.f1)).collect()),
        }
    }
}

impl fmt::Display for QualitySummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "aggregate count={} psnr={:.4} ssim={:.5} psnr_clean={:.4} psnr_deg={:.4} f1={:.4}",
            self.count, self.psnr_db, self.ssim, self.psnr_clean_region_db, self.psnr_degraded_region_db, self.f1
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_of_known_mse() {
        let a = Tensor::full(Shape::new(1, 3, 4, 4), 0.5f64);
        let b = a.add_scalar(0.1);
        assert!((psnr(&a, &b, 1.0, None).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 1.0, None).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn empty_region_rejected() {
        let a = Tensor::full(Shape::new(1, 1, 4, 4), 0.5f64);
        let m = Mask::zeros(1, 4, 4);
        assert!(matches!(psnr(&a, &a, 1.0, Some(&m)), Err(Error::EmptyRegion)));
    }

    #[test]
    fn ssim_identity_and_small_image() {
        let a = Tensor::from_fn(Shape::new(1, 1, 16, 16), |_, _, y, x| ((y * 7 + x * 3) % 11) as f64 / 10.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&Tensor::<f64>::zeros(Shape::new(1, 1, 8, 8)), &Tensor::zeros(Shape::new(1, 1, 8, 8))).is_err());
    }

    #[test]
    fn error_reduction_against_self_is_zero() {
        let (r, d) = error_reduction(30.0, 30.0, 0.9, 0.9);
        assert_eq!((r, d), (0.0, 0.0));
    }

    #[test]
    fn prf_conventions() {
        let gt = Mask::<f64>::from_fn(1, 4, 4, |_, y, _| y == 0);
        let s = mask_prf(&gt, &gt).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = mask_prf(&Mask::zeros(1, 4, 4), &gt).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        let empty = Mask::<f64>::zeros(1, 4, 4);
        assert_eq!(mask_prf(&empty, &empty).unwrap().f1, 1.0);
    }
}
