//! Directional sparse non-local aggregation.
//!
//! Every degraded pixel (query) scans its row and column in four directions.
//! In each direction it attends, with a softmax over channel inner products,
//! to the admissible source pixels strictly beyond it, and the four
//! directional contexts are mixed with per-pixel fusion weights `E`.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::stats::softmax_in_place;
use crate::tensor::{Mask, Tensor};

use super::{dot, to_pixel_major};

/// Which pixels may act as attention sources.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum SourcePolicy {
    /// Only clean pixels (`M = 0`).
    #[default]
    CleanOnly,
    /// Every pixel, including other degraded ones.
    AllPixels,
}

impl fmt::Display for SourcePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourcePolicy::CleanOnly => "clean_only",
            SourcePolicy::AllPixels => "all_pixels",
        })
    }
}

impl FromStr for SourcePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean_only" => Ok(SourcePolicy::CleanOnly),
            "all_pixels" => Ok(SourcePolicy::AllPixels),
            other => Err(Error::InvalidArgument(format!("unknown source policy `{other}`"))),
        }
    }
}

/// Scan directions in fusion-channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    /// Pixels strictly beyond `(y, x)` in this direction, nearest first.
    pub fn scan(self, y: usize, x: usize, h: usize, w: usize) -> Box<dyn Iterator<Item = (usize, usize)>> {
        match self {
            Direction::Left => Box::new((0..x).rev().map(move |xx| (y, xx))),
            Direction::Right => Box::new((x + 1..w).map(move |xx| (y, xx))),
            Direction::Up => Box::new((0..y).rev().map(move |yy| (yy, x))),
            Direction::Down => Box::new((y + 1..h).map(move |yy| (yy, x))),
        }
    }
}

fn admissible<T: Scalar>(mask: &[T], pix: usize, policy: SourcePolicy) -> bool {
    match policy {
        SourcePolicy::CleanOnly => mask[pix] == T::zero(),
        SourcePolicy::AllPixels => true,
    }
}

/// Admissible source coordinates of one sample, per row and per column,
/// in increasing order.
struct Lines {
    rows: Vec<Vec<usize>>,
    cols: Vec<Vec<usize>>,
    w: usize,
}

impl Lines {
    fn new<T: Scalar>(mask: &[T], policy: SourcePolicy, h: usize, w: usize) -> Self {
        let mut rows = vec![Vec::new(); h];
        let mut cols = vec![Vec::new(); w];
        for y in 0..h {
            for x in 0..w {
                if admissible(mask, y * w + x, policy) {
                    rows[y].push(x);
                    cols[x].push(y);
                }
            }
        }
        Self { rows, cols, w }
    }

    /// Source pixel indices strictly beyond `(y, x)` along `dir`, nearest first.
    fn sources(&self, dir: Direction, y: usize, x: usize, out: &mut Vec<usize>) {
        out.clear();
        let w = self.w;
        let row = &self.rows[y];
        let col = &self.cols[x];
        match dir {
            Direction::Left => out.extend(row[..row.partition_point(|&v| v < x)].iter().rev().map(|&xx| y * w + xx)),
            Direction::Right => out.extend(row[row.partition_point(|&v| v <= x)..].iter().map(|&xx| y * w + xx)),
            Direction::Up => out.extend(col[..col.partition_point(|&v| v < y)].iter().rev().map(|&yy| yy * w + x)),
            Direction::Down => out.extend(col[col.partition_point(|&v| v <= y)..].iter().map(|&yy| yy * w + x)),
        }
    }
}

pub(crate) fn check_aggregate<T: Scalar>(f: &Tensor<T>, e: &Tensor<T>, mask: &Mask<T>) -> Result<()> {
    let fs = f.shape();
    let es = e.shape();
    mask.check_matches(fs)?;
    if es.c != 4 {
        return shape_err(format!("fusion weights need exactly 4 direction channels, got {es}"));
    }
    if (es.n, es.h, es.w) != (fs.n, fs.h, fs.w) {
        return shape_err(format!("fusion weights {es} do not match features {fs}"));
    }
    Ok(())
}

/// `h = sum_k e^k * g^k` at masked pixels, zero elsewhere. Also returns the
/// MAC count.
pub(crate) fn snl_aggregate_forward<T: Scalar>(
    f: &Tensor<T>,
    e: &Tensor<T>,
    mask: &Mask<T>,
    policy: SourcePolicy,
) -> Result<(Tensor<T>, u64)> {
    check_aggregate(f, e, mask)?;
    let s = f.shape();
    let (c, h, w, plane) = (s.c, s.h, s.w, s.plane());
    let mut out = Tensor::zeros(s);
    let mut macs = 0u64;
    let mut src = Vec::new();
    let mut scores = Vec::new();
    let mut ctx = vec![T::zero(); c];
    let mut acc = vec![T::zero(); c];
    for n in 0..s.n {
        let m = mask.sample(n);
        let lines = Lines::new(m, policy, h, w);
        let fp = to_pixel_major(f.sample(n), c, plane);
        let es = e.sample(n);
        let dst = out.sample_mut(n);
        for q in (0..plane).filter(|&p| m[p] == T::one()) {
            let (y, x) = (q / w, q % w);
            let fq = &fp[q * c..(q + 1) * c];
            acc.fill(T::zero());
            for (k, dir) in Direction::ALL.into_iter().enumerate() {
                lines.sources(dir, y, x, &mut src);
                if src.is_empty() {
                    continue;
                }
                scores.clear();
                scores.extend(src.iter().map(|&p| dot(fq, &fp[p * c..(p + 1) * c])));
                softmax_in_place(&mut scores);
                ctx.fill(T::zero());
                for (&p, &o) in src.iter().zip(&scores) {
                    for (g, &v) in ctx.iter_mut().zip(&fp[p * c..(p + 1) * c]) {
                        *g += o * v;
                    }
                }
                let ek = es[k * plane + q];
                for (a, &g) in acc.iter_mut().zip(&ctx) {
                    *a += ek * g;
                }
                macs += ((2 * src.len() + 1) * c) as u64;
            }
            for ch in 0..c {
                dst[ch * plane + q] = acc[ch];
            }
        }
    }
    Ok((out, macs))
}

/// Gradients `(d_features, d_fusion)` of [`snl_aggregate_forward`].
pub(crate) fn snl_aggregate_backward<T: Scalar>(
    f: &Tensor<T>,
    e: &Tensor<T>,
    mask: &Mask<T>,
    policy: SourcePolicy,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let s = f.shape();
    let (c, h, w, plane) = (s.c, s.h, s.w, s.plane());
    let mut d_f = Tensor::zeros(s);
    let mut d_e = Tensor::zeros(e.shape());
    let mut src = Vec::new();
    let mut scores = Vec::new();
    let mut ctx = vec![T::zero(); c];
    let mut u = vec![T::zero(); c];
    let mut gq = vec![T::zero(); c];
    for n in 0..s.n {
        let m = mask.sample(n);
        let lines = Lines::new(m, policy, h, w);
        let fp = to_pixel_major(f.sample(n), c, plane);
        let gp = to_pixel_major(grad_out.sample(n), c, plane);
        let es = e.sample(n);
        let mut dfp = vec![T::zero(); plane * c];
        let de = d_e.sample_mut(n);
        for q in (0..plane).filter(|&p| m[p] == T::one()) {
            let (y, x) = (q / w, q % w);
            let fq = &fp[q * c..(q + 1) * c];
            gq.copy_from_slice(&gp[q * c..(q + 1) * c]);
            for (k, dir) in Direction::ALL.into_iter().enumerate() {
                lines.sources(dir, y, x, &mut src);
                if src.is_empty() {
                    continue;
                }
                scores.clear();
                scores.extend(src.iter().map(|&p| dot(fq, &fp[p * c..(p + 1) * c])));
                softmax_in_place(&mut scores);
                ctx.fill(T::zero());
                for (&p, &o) in src.iter().zip(&scores) {
                    for (g, &v) in ctx.iter_mut().zip(&fp[p * c..(p + 1) * c]) {
                        *g += o * v;
                    }
                }
                let ek = es[k * plane + q];
                de[k * plane + q] += dot(&gq, &ctx);
                for (ui, &gi) in u.iter_mut().zip(&gq) {
                    *ui = ek * gi;
                }
                let mut mean_a = T::zero();
                for (&p, &o) in src.iter().zip(&scores) {
                    mean_a += o * dot(&u, &fp[p * c..(p + 1) * c]);
                }
                for (&p, &o) in src.iter().zip(&scores) {
                    let a = dot(&u, &fp[p * c..(p + 1) * c]);
                    let ds = o * (a - mean_a);
                    for ch in 0..c {
                        // value path, then both arguments of the score
                        dfp[p * c + ch] += o * u[ch] + ds * fq[ch];
                        dfp[q * c + ch] += ds * fp[p * c + ch];
                    }
                }
            }
        }
        let dst = d_f.sample_mut(n);
        for p in 0..plane {
            for ch in 0..c {
                dst[ch * plane + p] = dfp[p * c + ch];
            }
        }
    }
    (d_f, d_e)
}

/// Raw directional aggregation `h` (zero at clean pixels) for given fusion
/// weights `E` with exactly 4 channels.
pub fn snl_aggregate<T: Scalar>(
    features: &Tensor<T>,
    fusion: &Tensor<T>,
    mask: &Mask<T>,
    policy: SourcePolicy,
) -> Result<Tensor<T>> {
    Ok(snl_aggregate_forward(features, fusion, mask, policy)?.0)
}

/// MAC count of the aggregation part of one attention step.
pub fn snl_aggregate_macs<T: Scalar>(mask: &Mask<T>, policy: SourcePolicy, channels: usize) -> u64 {
    let (h, w) = (mask.h(), mask.w());
    let mut src = Vec::new();
    let mut total = 0u64;
    for n in 0..mask.n() {
        let m = mask.sample(n);
        let lines = Lines::new(m, policy, h, w);
        for q in (0..h * w).filter(|&p| m[p] == T::one()) {
            for dir in Direction::ALL {
                lines.sources(dir, q / w, q % w, &mut src);
                if !src.is_empty() {
                    total += ((2 * src.len() + 1) * channels) as u64;
                }
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn single_right_source() {
        // row of 3: query at 1, clean source at 2, left neighbour degraded
        let f = Tensor::from_vec(Shape::new(1, 2, 1, 3), vec![0.3f64, 0.1, 0.7, -0.2, 0.4, 0.9]).unwrap();
        let m = Mask::from_vec(1, 1, 3, vec![1.0, 1.0, 0.0]).unwrap();
        let e = Tensor::from_fn(Shape::new(1, 4, 1, 3), |_, k, _, _| [0.5, 2.0, 0.3, 0.1][k]);
        let hq = snl_aggregate(&f, &e, &m, SourcePolicy::CleanOnly).unwrap();
        assert!((hq.at(0, 0, 0, 1) - 2.0 * 0.7).abs() < 1e-15);
        assert!((hq.at(0, 1, 0, 1) - 2.0 * 0.9).abs() < 1e-15);
        assert_eq!(hq.at(0, 0, 0, 2), 0.0);
    }

    #[test]
    fn identical_sources_share_weight() {
        let f = Tensor::from_fn(Shape::new(1, 1, 1, 3), |_, _, _, x| if x == 0 { 5.0f64 } else { 0.25 });
        let m = Mask::from_vec(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let e = Tensor::from_fn(Shape::new(1, 4, 1, 3), |_, k, _, _| if k == 1 { 1.0 } else { 0.0 });
        let hq = snl_aggregate(&f, &e, &m, SourcePolicy::CleanOnly).unwrap();
        assert!((hq.at(0, 0, 0, 0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn wrong_fusion_channel_count() {
        let f = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 2));
        let e = Tensor::zeros(Shape::new(1, 3, 2, 2));
        assert!(snl_aggregate(&f, &e, &Mask::ones(1, 2, 2), SourcePolicy::CleanOnly).is_err());
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("all_pixels".parse::<SourcePolicy>().unwrap(), SourcePolicy::AllPixels);
        assert!("everything".parse::<SourcePolicy>().is_err());
    }
}
