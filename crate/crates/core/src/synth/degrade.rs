use std::f64::consts::{FRAC_PI_2, FRAC_PI_6, PI, TAU};
use std::fmt;
use std::str::FromStr;

use super::rng::Rng;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Mask, Tensor};

/// Default severity threshold on `max_c |degraded - clean|`.
pub const DEFAULT_TAU: f64 = 0.1;

/// Largest fraction of degraded pixels a sample may have.
pub const MAX_DEGRADED_FRACTION: f64 = 0.5;

/// Extra primitives tried when the drawn ones leave no pixel above `tau`.
const RETRIES: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kind {
    Streak,
    Blob,
    Shadow,
    RegionBlur,
}

impl Kind {
    pub const ALL: [Kind; 4] = [Kind::Streak, Kind::Blob, Kind::Shadow, Kind::RegionBlur];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Streak => "streak",
            Kind::Blob => "blob",
            Kind::Shadow => "shadow",
            Kind::RegionBlur => "region_blur",
        }
    }

    /// Inclusive range of primitives drawn at severity 1.
    fn primitive_range(self) -> (u64, u64) {
        match self {
            Kind::Streak => (5, 40),
            Kind::Blob => (2, 10),
            Kind::Shadow | Kind::RegionBlur => (1, 3),
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Kind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown degradation kind '{s}'")))
    }
}

/// A clean image, its degraded version and the exact mask of severe changes.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub clean: Tensor<f32>,
    pub degraded: Tensor<f32>,
    pub gt_mask: Mask<f32>,
    pub kind: Kind,
    pub seed: u64,
    pub severity: f64,
}

/// `1` where the largest per-channel absolute difference exceeds `tau`.
pub fn gt_mask_from_pair<T: Scalar>(clean: &Tensor<T>, degraded: &Tensor<T>, tau: f64) -> Result<Mask<T>> {
    clean.check_same_shape(degraded, "ground-truth mask")?;
    let s = clean.shape();
    let plane = s.plane();
    let t = T::lit(tau);
    let mut out = Mask::zeros(s.n, s.h, s.w);
    for n in 0..s.n {
        let (a, b) = (clean.sample(n), degraded.sample(n));
        for p in 0..plane {
            let hit = (0..s.c).any(|c| (b[c * plane + p] - a[c * plane + p]).abs() > t);
            if hit {
                out.set(n, p / s.w, p % s.w, true);
            }
        }
    }
    Ok(out)
}

/// Working image: three f64 planes.
struct Canvas {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn from_tensor(t: &Tensor<f32>) -> Self {
        let s = t.shape();
        Self {
            h: s.h,
            w: s.w,
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.plane() + y * self.w + x]
    }

    fn get_clamped(&self, c: usize, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.get(c, y, x)
    }

    /// Blend every channel at pixel `p` towards `f(channel, old)` with weight `a`.
    fn blend(&mut self, p: usize, a: f64, f: impl Fn(usize, f64) -> f64) {
        if a <= 0.0 {
            return;
        }
        let plane = self.plane();
        for c in 0..3 {
            let v = &mut self.data[c * plane + p];
            *v = ((1.0 - a) * *v + a * f(c, *v)).clamp(0.0, 1.0);
        }
    }

    fn to_tensor(&self, like: &Tensor<f32>) -> Tensor<f32> {
        Tensor::from_vec(like.shape(), self.data.iter().map(|&v| v as f32).collect())
            .expect("canvas keeps the source shape")
    }

    fn box_blur(&self, k: usize) -> Canvas {
        let r = (k / 2) as isize;
        let mut data = vec![0.0; self.data.len()];
        let norm = (k * k) as f64;
        for c in 0..3 {
            for y in 0..self.h {
                for x in 0..self.w {
                    let mut acc = 0.0;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            acc += self.get_clamped(c, y as isize + dy, x as isize + dx);
                        }
                    }
                    data[c * self.plane() + y * self.w + x] = acc / norm;
                }
            }
        }
        Canvas {
            h: self.h,
            w: self.w,
            data,
        }
    }
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Whether the pixel centre `(x + 0.5, y + 0.5)` lies inside (or on the
/// boundary of) the convex polygon `quad` given as `(x, y)` vertices.
fn inside_convex(quad: &[(f64, f64); 4], x: usize, y: usize) -> bool {
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let mut sign = 0.0f64;
    for i in 0..4 {
        let (a, b) = (quad[i], quad[(i + 1) % 4]);
        let cross = (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0);
        if cross != 0.0 {
            if sign != 0.0 && cross.signum() != sign {
                return false;
            }
            sign = cross.signum();
        }
    }
    true
}

fn shadow_into(canvas: &mut Canvas, quad: &[(f64, f64); 4], factor: f64) {
    for y in 0..canvas.h {
        for x in 0..canvas.w {
            if inside_convex(quad, x, y) {
                canvas.blend(y * canvas.w + x, 1.0, |_, v| v * factor);
            }
        }
    }
}

/// Multiply every pixel whose centre falls inside the convex quadrilateral
/// `quad` (vertices as `(x, y)`) by `factor`.
pub fn apply_shadow_quad(image: &Tensor<f32>, quad: [(f64, f64); 4], factor: f64) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return shape_err(format!("expected a single RGB image, got {s}"));
    }
    let mut canvas = Canvas::from_tensor(image);
    shadow_into(&mut canvas, &quad, factor);
    Ok(canvas.to_tensor(image))
}

/// Draws and applies one primitive of `kind`.
fn primitive(kind: Kind, canvas: &mut Canvas, clean: &Canvas, blurs: &mut Vec<(usize, Canvas)>, dominant: f64, rng: &mut Rng) {
    let (h, w) = (canvas.h as f64, canvas.w as f64);
    let dim = h.min(w);
    match kind {
        Kind::Streak => {
            let angle = dominant + rng.uniform_in(-FRAC_PI_6, FRAC_PI_6);
            let len = rng.uniform_in(0.15, 0.5) * dim;
            let (cx, cy) = (rng.uniform_in(0.0, w), rng.uniform_in(0.0, h));
            let half = rng.uniform_in(0.5, 1.0);
            let gain = rng.uniform_in(0.3, 0.8);
            let (ux, uy) = (angle.cos() * len / 2.0, angle.sin() * len / 2.0);
            let (a, b) = ((cx - ux, cy - uy), (cx + ux, cy + uy));
            for y in 0..canvas.h {
                for x in 0..canvas.w {
                    let d = segment_distance(x as f64 + 0.5, y as f64 + 0.5, a, b);
                    let cov = (half + 0.5 - d).clamp(0.0, 1.0);
                    canvas.blend(y * canvas.w + x, cov, |_, v| v + gain);
                }
            }
        }
        Kind::Blob => {
            let r = rng.uniform_in(0.03, 0.12) * dim;
            let (cx, cy) = (rng.uniform_in(0.0, w), rng.uniform_in(0.0, h));
            let oy = rng.uniform_in(-1.5, 1.5) * r;
            let ox = rng.uniform_in(-1.5, 1.5) * r;
            let shift = rng.uniform_in(0.15, 0.35) * if rng.coin() { 1.0 } else { -1.0 };
            for y in 0..canvas.h {
                for x in 0..canvas.w {
                    let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                    let a = (r + 0.5 - d).clamp(0.0, 1.0);
                    if a <= 0.0 {
                        continue;
                    }
                    let sy = (y as f64 + oy).round() as isize;
                    let sx = (x as f64 + ox).round() as isize;
                    canvas.blend(y * canvas.w + x, a, |c, _| {
                        let mut acc = 0.0;
                        for dy in -1..=1 {
                            for dx in -1..=1 {
                                acc += clean.get_clamped(c, sy + dy, sx + dx);
                            }
                        }
                        acc / 9.0 + shift
                    });
                }
            }
        }
        Kind::Shadow => {
            let (cx, cy) = (rng.uniform_in(0.0, w), rng.uniform_in(0.0, h));
            let ax = rng.uniform_in(0.15, 0.35) * w;
            let ay = rng.uniform_in(0.15, 0.35) * h;
            let rot = rng.uniform_in(0.0, PI);
            let factor = rng.uniform_in(0.3, 0.6);
            // vertices on a rotated ellipse at increasing angles form a convex quad
            let mut quad = [(0.0, 0.0); 4];
            for (i, v) in quad.iter_mut().enumerate() {
                let t = i as f64 * FRAC_PI_2 + rng.uniform_in(-0.5, 0.5);
                let (ex, ey) = (ax * t.cos(), ay * t.sin());
                *v = (cx + ex * rot.cos() - ey * rot.sin(), cy + ex * rot.sin() + ey * rot.cos());
            }
            shadow_into(canvas, &quad, factor);
        }
        Kind::RegionBlur => {
            let k = [5, 7, 9][rng.below(3) as usize];
            let (cx, cy) = (rng.uniform_in(0.0, w), rng.uniform_in(0.0, h));
            let ax = rng.uniform_in(0.1, 0.25) * w;
            let ay = rng.uniform_in(0.1, 0.25) * h;
            if !blurs.iter().any(|(bk, _)| *bk == k) {
                blurs.push((k, clean.box_blur(k)));
            }
            let blurred = &blurs.iter().find(|(bk, _)| *bk == k).expect("inserted above").1;
            for y in 0..canvas.h {
                for x in 0..canvas.w {
                    let rho = (((x as f64 + 0.5 - cx) / ax).powi(2) + ((y as f64 + 0.5 - cy) / ay).powi(2)).sqrt();
                    let a = ((1.0 - rho) / 0.15).clamp(0.0, 1.0);
                    canvas.blend(y * canvas.w + x, a, |c, _| blurred.get(c, y, x));
                }
            }
        }
    }
}

/// Apply `round(severity * drawn)` primitives of `kind` to `clean`.
///
/// A primitive that would push the degraded fraction above one half is
/// dropped. If every drawn primitive left the mask empty, up to 32 extra
/// primitives are tried so that a positive severity yields a non-empty mask
/// whenever the image allows it.
pub fn degrade(clean: &Tensor<f32>, kind: Kind, seed: u64, severity: f64) -> Result<Sample> {
    let s = clean.shape();
    if s.n != 1 || s.c != 3 {
        return shape_err(format!("expected a single RGB image, got {s}"));
    }
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::InvalidArgument(format!("severity must lie in [0, 1], got {severity}")));
    }
    let mut rng = Rng::new(seed);
    let (lo, hi) = kind.primitive_range();
    let drawn = rng.range_inclusive(lo, hi);
    let count = (severity * drawn as f64).round() as usize;
    let dominant = rng.uniform_in(0.0, TAU);

    let base = Canvas::from_tensor(clean);
    let mut canvas = Canvas::from_tensor(clean);
    let mut blurs = Vec::new();
    let mut mask: Mask<f32> = Mask::zeros(1, s.h, s.w);
    let budget = if count > 0 { count + RETRIES } else { 0 };
    for i in 0..budget {
        if i >= count && mask.count() > 0 {
            break;
        }
        let before = canvas.data.clone();
        primitive(kind, &mut canvas, &base, &mut blurs, dominant, &mut rng);
        let trial = gt_mask_from_pair(clean, &canvas.to_tensor(clean), DEFAULT_TAU)?;
        if trial.fraction() > MAX_DEGRADED_FRACTION {
            canvas.data = before;
        } else {
            mask = trial;
        }
    }
    Ok(Sample {
        clean: clean.clone(),
        degraded: canvas.to_tensor(clean),
        gt_mask: mask,
        kind,
        seed,
        severity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gen_clean;
    use crate::tensor::Shape;

    #[test]
    fn kind_names_roundtrip() {
        for k in Kind::ALL {
            assert_eq!(k.name().parse::<Kind>().unwrap(), k);
        }
        assert!("rain".parse::<Kind>().is_err());
    }

    #[test]
    fn gt_mask_threshold() {
        let c = Tensor::full(Shape::new(1, 3, 2, 2), 0.5f32);
        let mut d = c.clone();
        d.set(0, 1, 1, 0, 1.0);
        let m = gt_mask_from_pair(&c, &d, 0.1).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.get(0, 1, 0));
        let faint = c.add_scalar(0.05);
        assert_eq!(gt_mask_from_pair(&c, &faint, 0.1).unwrap().count(), 0);
    }

    #[test]
    fn every_kind_respects_fraction_and_mask() {
        let clean = gen_clean(48, 48, 11).unwrap();
        for k in Kind::ALL {
            for seed in 0..6 {
                let s = degrade(&clean, k, seed, 1.0).unwrap();
                let f = s.gt_mask.fraction();
                assert!(f > 0.0 && f <= 0.5, "{k} seed {seed} fraction {f}");
                assert_eq!(s.gt_mask, gt_mask_from_pair(&s.clean, &s.degraded, DEFAULT_TAU).unwrap());
                assert!(s.degraded.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn zero_severity_is_identity() {
        let clean = gen_clean(32, 32, 1).unwrap();
        let s = degrade(&clean, Kind::Streak, 9, 0.0).unwrap();
        assert_eq!(s.degraded, clean);
        assert_eq!(s.gt_mask.count(), 0);
    }

    #[test]
    fn pixel_centre_convention() {
        let img = Tensor::full(Shape::new(1, 3, 24, 24), 0.5f32);
        let out = apply_shadow_quad(&img, [(8.0, 8.0), (16.0, 8.0), (16.0, 16.0), (8.0, 16.0)], 0.5).unwrap();
        let m = gt_mask_from_pair(&img, &out, 0.1).unwrap();
        assert_eq!(m.count(), 64);
        assert!(m.get(0, 8, 8) && m.get(0, 15, 15) && !m.get(0, 16, 16) && !m.get(0, 7, 8));
    }
}
