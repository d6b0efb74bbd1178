use super::{Shape, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::scalar::{gemm, Scalar};

/// Weights `(c_out, c_in, k, k)`, bias `(1, c_out, 1, 1)`, stride and zero
/// padding of a 2-D convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let p = Self {
            weight,
            bias,
            stride,
            padding,
        };
        p.validate()?;
        Ok(p)
    }

    /// Zero-bias, "same"-padded, stride-1 parameters.
    pub fn same(weight: Tensor<T>) -> Result<Self> {
        let k = weight.shape().h;
        let c_out = weight.shape().n;
        Self::new(weight, Tensor::zeros(Shape::new(1, c_out, 1, 1)), 1, k / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let ws = self.weight.shape();
        if ws.h != ws.w {
            return shape_err(format!("kernel must be square, got {ws}"));
        }
        if ws.h % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel size must be odd, got {}",
                ws.h
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        if self.bias.shape() != Shape::new(1, ws.n, 1, 1) {
            return shape_err(format!(
                "bias shape {} does not match {} output channels",
                self.bias.shape(),
                ws.n
            ));
        }
        Ok(())
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }
}

pub fn conv_output_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

/// Dense zero-padded 2-D convolution.
pub fn conv2d_dense<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    params.validate()?;
    conv2d_forward(
        input,
        &params.weight,
        Some(&params.bias),
        params.stride,
        params.padding,
    )
}

fn output_shape(x: Shape, w: Shape, stride: usize, pad: usize) -> Result<Shape> {
    if x.c != w.c {
        return shape_err(format!(
            "convolution expects {} input channels, got input {x}",
            w.c
        ));
    }
    let ho = conv_output_size(x.h, w.h, stride, pad);
    let wo = conv_output_size(x.w, w.w, stride, pad);
    match (ho, wo) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok(Shape::new(x.n, w.n, ho, wo)),
        _ => shape_err(format!(
            "input {x} too small for kernel {}x{} with padding {pad}",
            w.h, w.w
        )),
    }
}

fn is_pointwise(k: usize, stride: usize, pad: usize) -> bool {
    k == 1 && stride == 1 && pad == 0
}

/// Range of output columns `ox` whose input column `ox * stride + kx - pad`
/// falls inside `[0, w)`.
fn valid_span(wo: usize, w: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).div_ceil(stride);
    let hi = if w + pad > kx { ((w + pad - kx - 1) / stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfold one sample `(c, h, w)` into `(c*k*k, ho*wo)` columns.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                let (lo, hi) = valid_span(wo, w, kx, stride, pad);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let out_row = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let x0 = lo * stride + kx - pad;
                    if stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src_row[x0..x0 + hi - lo]);
                    } else {
                        for (o, &v) in out_row[lo..hi].iter_mut().zip(src_row[x0..].iter().step_by(stride)) {
                            *o = v;
                        }
                    }
                }
            }
        }
    }
}

/// Fold columns back, accumulating into `dst`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dst: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                let (lo, hi) = valid_span(wo, w, kx, stride, pad);
                if lo >= hi {
                    continue;
                }
                let x0 = lo * stride + kx - pad;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * wo + lo..oy * wo + hi];
                    if stride == 1 {
                        for (d, &v) in dst_row[x0..x0 + hi - lo].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst_row[x0..].iter_mut().step_by(stride).zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    let os = output_shape(xs, ws, stride, pad)?;
    let k = ws.h;
    let kdim = ws.c * k * k;
    let p = os.h * os.w;
    let mut out = Tensor::zeros(os);
    let mut cols = if is_pointwise(k, stride, pad) {
        Vec::new()
    } else {
        vec![T::zero(); kdim * p]
    };
    for n in 0..xs.n {
        let src = x.sample(n);
        let dst = out.sample_mut(n);
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if is_pointwise(k, stride, pad) {
            gemm(ws.n, kdim, p, T::one(), weight.data(), false, src, false, beta, dst);
        } else {
            im2col(src, xs.c, xs.h, xs.w, k, stride, pad, os.h, os.w, &mut cols);
            gemm(ws.n, kdim, p, T::one(), weight.data(), false, &cols, false, beta, dst);
        }
    }
    Ok(out)
}

/// Gradients of a dense convolution: `(d_input, d_weight, d_bias)`.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let xs = x.shape();
    let ws = weight.shape();
    let os = grad_out.shape();
    let k = ws.h;
    let kdim = ws.c * k * k;
    let p = os.h * os.w;
    let pointwise = is_pointwise(k, stride, pad);
    let mut d_w = Tensor::zeros(ws);
    let mut d_b = Tensor::zeros(Shape::new(1, ws.n, 1, 1));
    let mut d_x = need_input.then(|| Tensor::zeros(xs));
    let mut cols = vec![T::zero(); if pointwise { 0 } else { kdim * p }];
    let mut d_cols = vec![T::zero(); if pointwise || !need_input { 0 } else { kdim * p }];
    for n in 0..xs.n {
        let g = grad_out.sample(n);
        for (co, chunk) in g.chunks(p).enumerate() {
            d_b.data_mut()[co] += chunk.iter().fold(T::zero(), |a, &v| a + v);
        }
        let src: &[T] = if pointwise {
            x.sample(n)
        } else {
            im2col(x.sample(n), xs.c, xs.h, xs.w, k, stride, pad, os.h, os.w, &mut cols);
            &cols
        };
        // dW (c_out x kdim) += G (c_out x p) * cols^T (p x kdim)
        gemm(ws.n, p, kdim, T::one(), g, false, src, true, T::one(), d_w.data_mut());
        if let Some(dx) = d_x.as_mut() {
            if pointwise {
                gemm(kdim, ws.n, p, T::one(), weight.data(), true, g, false, T::one(), dx.sample_mut(n));
            } else {
                gemm(kdim, ws.n, p, T::one(), weight.data(), true, g, false, T::zero(), &mut d_cols);
                col2im(&d_cols, xs.c, xs.h, xs.w, k, stride, pad, os.h, os.w, dx.sample_mut(n));
            }
        }
    }
    (d_x, d_w, d_b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(shape: Shape) -> Tensor<f64> {
        Tensor::full(shape, 1.0)
    }

    #[test]
    fn all_ones_counts_padded_neighbours() {
        let x = ones(Shape::new(1, 1, 3, 3));
        let p = ConvParams::same(ones(Shape::new(1, 1, 3, 3))).unwrap();
        let y = conv2d_dense(&x, &p).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        for (yy, xx) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at(0, 0, yy, xx), 4.0);
        }
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::from_fn(Shape::new(2, 1, 4, 5), |n, _, y, x| (n * 20 + y * 5 + x) as f64);
        let p = ConvParams::same(ones(Shape::new(1, 1, 1, 1))).unwrap();
        assert_eq!(conv2d_dense(&x, &p).unwrap(), x);
    }

    #[test]
    fn strided_output_size() {
        let x = ones(Shape::new(1, 2, 8, 6));
        let p = ConvParams::new(
            ones(Shape::new(3, 2, 3, 3)),
            Tensor::zeros(Shape::new(1, 3, 1, 1)),
            2,
            1,
        )
        .unwrap();
        assert_eq!(conv2d_dense(&x, &p).unwrap().shape(), Shape::new(1, 3, 4, 3));
    }

    #[test]
    fn rejects_channel_mismatch_and_even_kernels() {
        let x = ones(Shape::new(1, 2, 4, 4));
        let p = ConvParams::same(ones(Shape::new(1, 3, 3, 3))).unwrap();
        assert!(matches!(conv2d_dense(&x, &p), Err(Error::Shape(_))));
        assert!(ConvParams::same(ones(Shape::new(1, 2, 2, 2))).is_err());
    }
}
