use super::{Shape, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Per-sample binary grid: 1 marks a degraded pixel, 0 a clean one.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask<T> {
    n: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mask<T> {
    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            h,
            w,
            data: vec![T::zero(); n * h * w],
        }
    }

    pub fn ones(n: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            h,
            w,
            data: vec![T::one(); n * h * w],
        }
    }

    /// Build from raw values, rejecting anything other than exactly 0 or 1.
    pub fn from_vec(n: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * h * w {
            return shape_err(format!(
                "mask data length {} does not match {n}x{h}x{w}",
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| **v != T::zero() && **v != T::one()) {
            return Err(Error::InvalidArgument(format!("mask value {v} is not 0 or 1")));
        }
        Ok(Self { n, h, w, data })
    }

    pub fn from_fn(n: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(n * h * w);
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    data.push(if f(b, y, x) { T::one() } else { T::zero() });
                }
            }
        }
        Self { n, h, w, data }
    }

    /// Binarize a single-channel probability map: `p > threshold` → 1.
    pub fn threshold(prob: &Tensor<T>, threshold: T) -> Result<Self> {
        let s = prob.shape();
        if s.c != 1 {
            return shape_err(format!("mask threshold expects one channel, got {s}"));
        }
        Ok(Self::from_fn(s.n, s.h, s.w, |n, y, x| prob.at(n, 0, y, x) > threshold))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let p = self.h * self.w;
        &self.data[n * p..(n + 1) * p]
    }

    #[inline]
    pub fn get(&self, n: usize, y: usize, x: usize) -> bool {
        self.data[(n * self.h + y) * self.w + x] == T::one()
    }

    pub fn set(&mut self, n: usize, y: usize, x: usize, on: bool) {
        self.data[(n * self.h + y) * self.w + x] = if on { T::one() } else { T::zero() };
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v == T::one()).count()
    }

    pub fn count_sample(&self, n: usize) -> usize {
        self.sample(n).iter().filter(|v| **v == T::one()).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    /// `1 - M`.
    pub fn complement(&self) -> Self {
        Self {
            n: self.n,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| T::one() - v).collect(),
        }
    }

    /// Check that this mask gates features of the given shape.
    pub fn check_matches(&self, shape: Shape) -> Result<()> {
        if self.n != shape.n || self.h != shape.h || self.w != shape.w {
            return shape_err(format!(
                "mask {}x{}x{} does not match features {shape}",
                self.n, self.h, self.w
            ));
        }
        Ok(())
    }

    /// Single-channel tensor view of the mask values.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(Shape::new(self.n, 1, self.h, self.w), self.data.clone())
            .expect("mask length is consistent")
    }

    pub fn cast<U: Scalar>(&self) -> Mask<U> {
        Mask {
            n: self.n,
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .map(|&v| if v == T::one() { U::one() } else { U::zero() })
                .collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.n, self.h, self.w, |n, y, x| self.get(n, y, self.w - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.n, self.h, self.w, |n, y, x| self.get(n, self.h - 1 - y, x))
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.h || x0 + w > self.w {
            return shape_err(format!("mask crop {h}x{w}+{y0}+{x0} outside {}x{}", self.h, self.w));
        }
        Ok(Self::from_fn(self.n, h, w, |n, y, x| self.get(n, y0 + y, x0 + x)))
    }

    pub fn stack(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty mask batch".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if (p.h, p.w) != (first.h, first.w) {
                return shape_err("mask batch with differing resolutions");
            }
            data.extend_from_slice(&p.data);
            n += p.n;
        }
        Ok(Self {
            n,
            h: first.h,
            w: first.w,
            data,
        })
    }

    pub fn batch_item(&self, n: usize) -> Self {
        Self {
            n: 1,
            h: self.h,
            w: self.w,
            data: self.sample(n).to_vec(),
        }
    }
}

/// Max-pool a mask by `factor`: an output cell is set iff any covered input
/// cell is set.
pub fn downsample_mask<T: Scalar>(mask: &Mask<T>, factor: usize) -> Result<Mask<T>> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "mask downsampling factor {factor} is not a power of two"
        )));
    }
    if mask.h % factor != 0 || mask.w % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "mask {}x{} is not divisible by factor {factor}",
            mask.h, mask.w
        )));
    }
    if factor == 1 {
        return Ok(mask.clone());
    }
    let (h, w) = (mask.h / factor, mask.w / factor);
    let mut out = Mask::zeros(mask.n, h, w);
    for n in 0..mask.n {
        for y in 0..mask.h {
            for x in 0..mask.w {
                if mask.get(n, y, x) {
                    out.set(n, y / factor, x / factor, true);
                }
            }
        }
    }
    Ok(out)
}
