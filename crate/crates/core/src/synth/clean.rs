use std::f64::consts::TAU;

use super::rng::Rng;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const LO: f64 = 0.05;
const HI: f64 = 0.95;
const NOISE_GRID: usize = 8;
const NOISE_AMP: f64 = 0.25;

/// Bilinearly interpolated lattice noise in roughly `[-1, 1]`.
fn value_noise(rng: &mut Rng, h: usize, w: usize) -> Vec<f64> {
    let g = NOISE_GRID;
    let lattice: Vec<f64> = (0..(g + 1) * (g + 1)).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / h as f64 * g as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / w as f64 * g as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let at = |yy: usize, xx: usize| lattice[yy * (g + 1) + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Procedural clean image `(1, 3, h, w)`: per channel a sum of 4 to 8
/// random 2-D sinusoids plus low-amplitude value noise, min-max normalized
/// to `[0.05, 0.95]`.
pub fn gen_clean(h: usize, w: usize, seed: u64) -> Result<Tensor<f32>> {
    if h < 16 || w < 16 {
        return Err(Error::InvalidArgument(format!("clean images need h, w >= 16, got {h}x{w}")));
    }
    let mut rng = Rng::new(seed);
    let plane = h * w;
    let mut data = Vec::with_capacity(3 * plane);
    for _ in 0..3 {
        let waves = rng.range_inclusive(4, 8);
        let mut ch = vec![0.0f64; plane];
        for _ in 0..waves {
            let amp = rng.uniform_in(0.3, 1.0);
            let fy = rng.uniform_in(-5.0, 5.0) / h as f64;
            let fx = rng.uniform_in(-5.0, 5.0) / w as f64;
            let phase = rng.uniform_in(0.0, TAU);
            for (i, v) in ch.iter_mut().enumerate() {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                *v += amp * (TAU * (fy * y + fx * x) + phase).sin();
            }
        }
        let noise = value_noise(&mut rng, h, w);
        for (v, n) in ch.iter_mut().zip(&noise) {
            *v += NOISE_AMP * n;
        }
        let (mn, mx) = ch.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = (mx - mn).max(1e-12);
        data.extend(ch.iter().map(|&v| (LO + (HI - LO) * (v - mn) / span) as f32));
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data)
}
