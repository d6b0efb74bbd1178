//! Dense rank-4 tensors, binary masks and the reference numeric kernels the
//! rest of the crate builds on.
//!
//! Layout is always `(n, c, h, w)` row-major with `w` innermost. There is no
//! broadcasting: binary operations require identical shapes.

mod conv;
mod mask;
pub(crate) mod stats;

use std::fmt;

pub use conv::{conv2d_dense, conv_output_size, ConvParams};
pub(crate) use conv::{conv2d_backward, conv2d_forward};
pub use mask::{downsample_mask, Mask};
pub use stats::{masked_stats, softmax, ChannelStats, STATS_EPS};

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return shape_err(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Shape::scalar(),
            data: vec![v],
        }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous `(c, h, w)` block of one batch element.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape.c * self.shape.plane();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return shape_err(format!("cannot reshape {} into {shape}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("{what}: {} vs {}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other, "elementwise operands")?;
        Ok(Self {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: T) -> Self {
        self.map(|v| v + s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "accumulation")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other, "comparison")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Elementwise product with a mask broadcast over channels.
    pub fn mul_mask(&self, mask: &Mask<T>) -> Result<Self> {
        mask.check_matches(self.shape)?;
        let plane = self.shape.plane();
        let mut out = self.clone();
        for n in 0..self.shape.n {
            let m = mask.sample(n);
            for c in 0..self.shape.c {
                let off = (n * self.shape.c + c) * plane;
                for (v, &mv) in out.data[off..off + plane].iter_mut().zip(m) {
                    *v *= mv;
                }
            }
        }
        Ok(out)
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| crate::Error::InvalidArgument("concat of zero tensors".into()))?;
        let (n, h, w) = (first.shape.n, first.shape.h, first.shape.w);
        let mut c_total = 0;
        for p in parts {
            if p.shape.n != n || p.shape.h != h || p.shape.w != w {
                return shape_err(format!("concat: {} vs {}", first.shape, p.shape));
            }
            c_total += p.shape.c;
        }
        let shape = Shape::new(n, c_total, h, w);
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..n {
            for p in parts {
                data.extend_from_slice(p.sample(b));
            }
        }
        Ok(Self { shape, data })
    }

    /// Reverse the width axis.
    pub fn flip_horizontal(&self) -> Self {
        let s = self.shape;
        Self::from_fn(s, |n, c, y, x| self.at(n, c, y, s.w - 1 - x))
    }

    /// Reverse the height axis.
    pub fn flip_vertical(&self) -> Self {
        let s = self.shape;
        Self::from_fn(s, |n, c, y, x| self.at(n, c, s.h - 1 - y, x))
    }

    /// Spatial crop `[y0, y0+h) x [x0, x0+w)` of every sample and channel.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let s = self.shape;
        if y0 + h > s.h || x0 + w > s.w {
            return shape_err(format!("crop {h}x{w}+{y0}+{x0} outside {s}"));
        }
        Ok(Self::from_fn(Shape::new(s.n, s.c, h, w), |n, c, y, x| {
            self.at(n, c, y0 + y, x0 + x)
        }))
    }

    /// Select batch elements by index into a new tensor.
    pub fn gather_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| crate::Error::InvalidArgument("empty batch".into()))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * parts.len());
        let mut n = 0;
        for p in parts {
            if (p.shape.c, p.shape.h, p.shape.w) != (s.c, s.h, s.w) {
                return shape_err(format!("batch stacking: {} vs {}", s, p.shape));
            }
            data.extend_from_slice(&p.data);
            n += p.shape.n;
        }
        Ok(Self {
            shape: Shape::new(n, s.c, s.h, s.w),
            data,
        })
    }

    /// Split out batch element `n` as a standalone `(1, c, h, w)` tensor.
    pub fn batch_item(&self, n: usize) -> Self {
        Self {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.sample(n).to_vec(),
        }
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = x.shape();
    let wo = s.w * factor;
    let mut data = Vec::with_capacity(s.numel() * factor * factor);
    let mut row = Vec::with_capacity(wo);
    for src in x.data().chunks(s.w) {
        row.clear();
        for &v in src {
            row.extend(std::iter::repeat_n(v, factor));
        }
        for _ in 0..factor {
            data.extend_from_slice(&row);
        }
    }
    Tensor {
        shape: Shape::new(s.n, s.c, s.h * factor, wo),
        data,
    }
}
