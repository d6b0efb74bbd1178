//! Brute-force reference implementations shared by the integration tests.
//! Each one is written from the operator definitions with plain loops and
//! shares no code with the library kernels.

#![allow(dead_code)]

use spair::guided::SourcePolicy;
use spair::synth::Rng;
use spair::tensor::{Mask, Shape, Tensor};

pub fn rand_tensor(rng: &mut Rng, s: Shape, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(s, |_, _, _, _| rng.uniform_in(-scale, scale))
}

pub fn rand_mask(rng: &mut Rng, n: usize, h: usize, w: usize, density: f64) -> Mask<f64> {
    Mask::from_fn(n, h, w, |_, _, _| rng.uniform() < density)
}

pub fn max_abs(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn m(mask: &Mask<f64>, n: usize, y: usize, x: usize) -> f64 {
    if mask.get(n, y, x) {
        1.0
    } else {
        0.0
    }
}

/// Zero-padded cross-correlation, one output value at a time.
pub fn conv_oracle(input: &Tensor<f64>, weight: &Tensor<f64>, bias: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let s = input.shape();
    let ws = weight.shape();
    let k = ws.h;
    let oh = (s.h + 2 * pad - k) / stride + 1;
    let ow = (s.w + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(Shape::new(s.n, ws.n, oh, ow));
    for n in 0..s.n {
        for o in 0..ws.n {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b.at(0, o, 0, 0));
                    for c in 0..s.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (x * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                acc += weight.at(o, c, ky, kx) * input.at(n, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(n, o, y, x, acc);
                }
            }
        }
    }
    out
}

/// `M * conv(F * M) + bias * M` for a same-size odd kernel.
pub fn sparse_conv_oracle(f: &Tensor<f64>, mask: &Mask<f64>, weight: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
    let s = f.shape();
    let masked = Tensor::from_fn(s, |n, c, y, x| f.at(n, c, y, x) * m(mask, n, y, x));
    let conv = conv_oracle(&masked, weight, None, 1, weight.shape().h / 2);
    let cs = conv.shape();
    Tensor::from_fn(cs, |n, o, y, x| {
        let mv = m(mask, n, y, x);
        mv * conv.at(n, o, y, x) + bias.at(0, o, 0, 0) * mv
    })
}

/// `M * (W x + b) + (1 - M) * x` through a dense 1x1 convolution.
pub fn pointwise_oracle(f: &Tensor<f64>, mask: &Mask<f64>, weight: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
    let conv = conv_oracle(f, weight, Some(bias), 1, 0);
    Tensor::from_fn(f.shape(), |n, c, y, x| {
        let mv = m(mask, n, y, x);
        mv * conv.at(n, c, y, x) + (1.0 - mv) * f.at(n, c, y, x)
    })
}

pub fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.2 * x
    }
}

/// Six densely connected sparse convolutions with activations, a sparse 1x1
/// reduction, and the result added to `f` at masked pixels.
pub fn sc_block_oracle(f: &Tensor<f64>, mask: &Mask<f64>, layers: &[(Tensor<f64>, Tensor<f64>)], reduce: &(Tensor<f64>, Tensor<f64>)) -> Tensor<f64> {
    let mut feats = vec![f.clone()];
    for (w, b) in layers {
        let input = Tensor::concat_channels(&feats.iter().collect::<Vec<_>>()).unwrap();
        let y = sparse_conv_oracle(&input, mask, w, b).map(leaky);
        feats.push(y);
    }
    let all = Tensor::concat_channels(&feats.iter().collect::<Vec<_>>()).unwrap();
    let branch = sparse_conv_oracle(&all, mask, &reduce.0, &reduce.1);
    Tensor::from_fn(f.shape(), |n, c, y, x| f.at(n, c, y, x) + m(mask, n, y, x) * branch.at(n, c, y, x))
}

/// One attention step by looping over every (query, direction, source).
/// Fusion channels are ordered left, right, up, down.
pub fn snl_step_oracle(f: &Tensor<f64>, mask: &Mask<f64>, policy: SourcePolicy, fw: &Tensor<f64>, fb: &Tensor<f64>) -> Tensor<f64> {
    let s = f.shape();
    let e = conv_oracle(f, fw, Some(fb), 1, fw.shape().h / 2);
    let mut out = f.clone();
    let admits = |n: usize, y: usize, x: usize| match policy {
        SourcePolicy::CleanOnly => !mask.get(n, y, x),
        SourcePolicy::AllPixels => true,
    };
    for n in 0..s.n {
        for i in 0..s.h {
            for j in 0..s.w {
                if !mask.get(n, i, j) {
                    continue;
                }
                let mut h = vec![0.0; s.c];
                for dir in 0..4 {
                    let sources: Vec<(usize, usize)> = match dir {
                        0 => (0..j).map(|x| (i, x)).collect(),
                        1 => (j + 1..s.w).map(|x| (i, x)).collect(),
                        2 => (0..i).map(|y| (y, j)).collect(),
                        _ => (i + 1..s.h).map(|y| (y, j)).collect(),
                    };
                    let sources: Vec<_> = sources.into_iter().filter(|&(y, x)| admits(n, y, x)).collect();
                    if sources.is_empty() {
                        continue;
                    }
                    let scores: Vec<f64> = sources
                        .iter()
                        .map(|&(y, x)| (0..s.c).map(|c| f.at(n, c, i, j) * f.at(n, c, y, x)).sum())
                        .collect();
                    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|v| (v - top).exp()).sum();
                    let weight = e.at(n, dir, i, j);
                    for (&(y, x), sc) in sources.iter().zip(&scores) {
                        let o = (sc - top).exp() / z;
                        for (c, hc) in h.iter_mut().enumerate() {
                            *hc += weight * o * f.at(n, c, y, x);
                        }
                    }
                }
                for (c, hc) in h.iter().enumerate() {
                    out.set(n, c, i, j, f.at(n, c, i, j) + hc);
                }
            }
        }
    }
    out
}

/// Per-channel mean and standard deviation (with the 1e-5 variance floor) of
/// sample `n` over pixels where `region` is set.
pub fn region_stats(t: &Tensor<f64>, region: &Mask<f64>, n: usize) -> Vec<(f64, f64)> {
    let s = t.shape();
    (0..s.c)
        .map(|c| {
            let (mut sum, mut sq, mut cnt) = (0.0, 0.0, 0.0);
            for y in 0..s.h {
                for x in 0..s.w {
                    if region.get(n, y, x) {
                        let v = t.at(n, c, y, x);
                        sum += v;
                        sq += v * v;
                        cnt += 1.0;
                    }
                }
            }
            let mean = sum / cnt;
            (mean, (sq / cnt - mean * mean + 1e-5).sqrt())
        })
        .collect()
}
