//! Mask-guided sparse convolution.
//!
//! Output pixels with `M = 0` are zero; at `M = 1` the kernel only sees
//! neighbours that are themselves masked. The kernel is evaluated as a
//! gather / GEMM / scatter over a per-offset rulebook of
//! `(active output, active input)` pairs, so the work done is exactly
//! proportional to the number of masked neighbour pairs.

use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{ConvParams, Mask, Shape, Tensor};

/// Active pixels of one sample and, per kernel offset, the pairs
/// `(row into active list, input pixel index)`.
pub(crate) struct Rulebook {
    pub active: Vec<usize>,
    pub pairs: Vec<Vec<(usize, usize)>>,
}

impl Rulebook {
    pub fn build<T: Scalar>(mask: &[T], h: usize, w: usize, k: usize) -> Self {
        let r = (k / 2) as isize;
        let on = |i: usize| mask[i] == T::one();
        let active: Vec<usize> = (0..h * w).filter(|&i| on(i)).collect();
        let mut pairs = vec![Vec::new(); k * k];
        for (row, &pix) in active.iter().enumerate() {
            let (y, x) = ((pix / w) as isize, (pix % w) as isize);
            for ky in 0..k {
                let iy = y + ky as isize - r;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = x + kx as isize - r;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = iy as usize * w + ix as usize;
                    if on(src) {
                        pairs[ky * k + kx].push((row, src));
                    }
                }
            }
        }
        Self { active, pairs }
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }
}

/// Weight slice for one kernel offset laid out `(c_in, c_out)`.
fn offset_weights<T: Scalar>(weight: &Tensor<T>, offset: usize) -> Vec<T> {
    let s = weight.shape();
    let kk = s.h * s.w;
    let mut out = Vec::with_capacity(s.c * s.n);
    for ci in 0..s.c {
        for co in 0..s.n {
            out.push(weight.data()[(co * s.c + ci) * kk + offset]);
        }
    }
    out
}

fn gather_rows<T: Scalar>(src: &[T], channels: usize, plane: usize, pixels: impl Iterator<Item = usize>, out: &mut Vec<T>) {
    out.clear();
    for pix in pixels {
        for c in 0..channels {
            out.push(src[c * plane + pix]);
        }
    }
}

pub(crate) fn check_sparse_params<T: Scalar>(x: Shape, mask: &Mask<T>, weight: &Tensor<T>) -> Result<()> {
    let ws = weight.shape();
    if ws.h != ws.w || ws.h % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "sparse convolution needs an odd square kernel, got {}x{}",
            ws.h, ws.w
        )));
    }
    if ws.c != x.c {
        return Err(Error::Shape(format!(
            "sparse convolution expects {} input channels, got {x}",
            ws.c
        )));
    }
    mask.check_matches(x)
}

pub(crate) fn sparse_conv_forward<T: Scalar>(
    x: &Tensor<T>,
    mask: &Mask<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, u64)> {
    check_sparse_params(x.shape(), mask, weight)?;
    let xs = x.shape();
    let ws = weight.shape();
    let (k, c_in, c_out, plane) = (ws.h, ws.c, ws.n, xs.plane());
    let mut out = Tensor::zeros(Shape::new(xs.n, c_out, xs.h, xs.w));
    let w_offsets: Vec<Vec<T>> = (0..k * k).map(|o| offset_weights(weight, o)).collect();
    let mut macs = 0u64;
    let mut a = Vec::new();
    let mut tmp = Vec::new();
    for n in 0..xs.n {
        let book = Rulebook::build(mask.sample(n), xs.h, xs.w, k);
        let rows = book.active.len();
        if rows == 0 {
            continue;
        }
        let mut acc = vec![T::zero(); rows * c_out];
        let src = x.sample(n);
        for (o, pairs) in book.pairs.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            macs += (pairs.len() * c_in * c_out) as u64;
            gather_rows(src, c_in, plane, pairs.iter().map(|p| p.1), &mut a);
            tmp.clear();
            tmp.resize(pairs.len() * c_out, T::zero());
            gemm(pairs.len(), c_in, c_out, T::one(), &a, false, &w_offsets[o], false, T::zero(), &mut tmp);
            for (i, &(row, _)) in pairs.iter().enumerate() {
                let dst = &mut acc[row * c_out..(row + 1) * c_out];
                for (d, &t) in dst.iter_mut().zip(&tmp[i * c_out..(i + 1) * c_out]) {
                    *d += t;
                }
            }
        }
        let dst = out.sample_mut(n);
        for (row, &pix) in book.active.iter().enumerate() {
            for co in 0..c_out {
                let b = bias.map_or(T::zero(), |b| b.data()[co]);
                dst[co * plane + pix] = acc[row * c_out + co] + b;
            }
        }
    }
    Ok((out, macs))
}

/// Gradients `(d_input, d_weight, d_bias)` of [`sparse_conv_forward`].
pub(crate) fn sparse_conv_backward<T: Scalar>(
    x: &Tensor<T>,
    mask: &Mask<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let xs = x.shape();
    let ws = weight.shape();
    let (k, c_in, c_out, plane) = (ws.h, ws.c, ws.n, xs.plane());
    let kk = k * k;
    let mut d_x = Tensor::zeros(xs);
    let mut d_w_off = vec![vec![T::zero(); c_in * c_out]; kk];
    let mut d_b = Tensor::zeros(Shape::new(1, c_out, 1, 1));
    let w_offsets: Vec<Vec<T>> = (0..kk).map(|o| offset_weights(weight, o)).collect();
    let mut a = Vec::new();
    let mut gy = Vec::new();
    let mut da = Vec::new();
    for n in 0..xs.n {
        let book = Rulebook::build(mask.sample(n), xs.h, xs.w, k);
        if book.active.is_empty() {
            continue;
        }
        let g = grad_out.sample(n);
        for &pix in &book.active {
            for co in 0..c_out {
                d_b.data_mut()[co] += g[co * plane + pix];
            }
        }
        let src = x.sample(n);
        let dst = d_x.sample_mut(n);
        for (o, pairs) in book.pairs.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            let p = pairs.len();
            gather_rows(src, c_in, plane, pairs.iter().map(|q| q.1), &mut a);
            gather_rows(g, c_out, plane, pairs.iter().map(|q| book.active[q.0]), &mut gy);
            // dW_o (c_in x c_out) += A^T (c_in x p) * GY (p x c_out)
            gemm(c_in, p, c_out, T::one(), &a, true, &gy, false, T::one(), &mut d_w_off[o]);
            // dA (p x c_in) = GY (p x c_out) * W_o^T (c_out x c_in)
            da.clear();
            da.resize(p * c_in, T::zero());
            gemm(p, c_out, c_in, T::one(), &gy, false, &w_offsets[o], true, T::zero(), &mut da);
            for (i, &(_, src_pix)) in pairs.iter().enumerate() {
                for ci in 0..c_in {
                    dst[ci * plane + src_pix] += da[i * c_in + ci];
                }
            }
        }
    }
    let mut d_w = Tensor::zeros(ws);
    for (o, dw) in d_w_off.iter().enumerate() {
        for ci in 0..c_in {
            for co in 0..c_out {
                d_w.data_mut()[(co * c_in + ci) * kk + o] = dw[ci * c_out + co];
            }
        }
    }
    (d_x, d_w, d_b)
}

/// Mask-guided sparse convolution. Requires stride 1 and "same" padding.
pub fn sparse_conv<T: Scalar>(features: &Tensor<T>, mask: &Mask<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    check_sparse_conv_params(params)?;
    Ok(sparse_conv_forward(features, mask, &params.weight, Some(&params.bias))?.0)
}

/// Like [`sparse_conv`] but also returns the multiply-accumulate count.
pub fn sparse_conv_counted<T: Scalar>(
    features: &Tensor<T>,
    mask: &Mask<T>,
    params: &ConvParams<T>,
) -> Result<(Tensor<T>, u64)> {
    check_sparse_conv_params(params)?;
    sparse_conv_forward(features, mask, &params.weight, Some(&params.bias))
}

fn check_sparse_conv_params<T: Scalar>(params: &ConvParams<T>) -> Result<()> {
    params.validate()?;
    if params.stride != 1 || params.padding != params.kernel() / 2 {
        return Err(Error::InvalidArgument(format!(
            "sparse convolution needs stride 1 and padding {}, got stride {} padding {}",
            params.kernel() / 2,
            params.stride,
            params.padding
        )));
    }
    Ok(())
}

/// Multiply-accumulate count of a sparse convolution over `mask`.
pub fn sparse_conv_macs<T: Scalar>(mask: &Mask<T>, k: usize, c_in: usize, c_out: usize) -> u64 {
    (0..mask.n())
        .map(|n| Rulebook::build(mask.sample(n), mask.h(), mask.w(), k).pair_count() as u64)
        .sum::<u64>()
        * (c_in * c_out) as u64
}
