//! Wall time and exact MAC counts of sparse ops against the dense
//! convolution they replace.

use std::fmt;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::guided::{snl_step, snl_step_macs, sparse_conv_counted, SourcePolicy};
use crate::synth::Rng;
use crate::tensor::{conv2d_dense, ConvParams, Mask, Shape, Tensor};

pub const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub resolutions: Vec<usize>,
    pub channels: Vec<usize>,
    pub densities: Vec<f64>,
    /// Timed repeats after one untimed warm-up run.
    pub repeats: usize,
    pub seed: u64,
    /// Also time the SNL attention step.
    pub include_snl: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![64, 128],
            channels: vec![16, 32],
            densities: vec![0.0, 0.1, 0.25, 0.5, 1.0],
            repeats: 5,
            seed: 0,
            include_snl: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub op: &'static str,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub density: f64,
    pub wall_ns_median: u64,
    pub mac_count: u64,
}

impl BenchRow {
    fn key(&self) -> (&'static str, usize, usize, usize, f64) {
        (self.op, self.h, self.w, self.c, self.density)
    }
}

impl fmt::Display for BenchRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{}",
            self.op, self.h, self.w, self.c, self.density, self.wall_ns_median, self.mac_count
        )
    }
}

/// Bernoulli(`density`) mask of one `h x w` sample.
pub fn random_mask(h: usize, w: usize, density: f64, rng: &mut Rng) -> Mask<f32> {
    Mask::from_fn(1, h, w, |_, _, _| rng.uniform() < density)
}

fn random_tensor(shape: Shape, scale: f64, rng: &mut Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_, _, _, _| rng.uniform_in(-scale, scale) as f32)
}

/// Median wall time of `repeats` runs of `f`, after one warm-up run whose
/// result is returned.
pub fn time_median<R>(repeats: usize, mut f: impl FnMut() -> Result<R>) -> Result<(u64, R)> {
    let first = f()?;
    let mut times = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        std::hint::black_box(f()?);
        times.push(t.elapsed().as_nanos() as u64);
    }
    times.sort_unstable();
    Ok((times[times.len() / 2], first))
}

/// Runs every `(resolution, channels, density)` cell. Rows are sorted by
/// `(op, h, w, c, density)`.
pub fn bench_sparse(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if let Some(d) = cfg.densities.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(Error::InvalidArgument(format!("density {d} outside [0, 1]")));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut rows = Vec::new();
    for &s in &cfg.resolutions {
        for &c in &cfg.channels {
            let x = random_tensor(Shape::new(1, c, s, s), 1.0, &mut rng);
            let conv = ConvParams::same(random_tensor(Shape::new(c, c, KERNEL, KERNEL), 0.1, &mut rng))?;
            let fusion = ConvParams::same(random_tensor(Shape::new(4, c, KERNEL, KERNEL), 0.1, &mut rng))?;
            let (ns, _) = time_median(cfg.repeats, || conv2d_dense(&x, &conv))?;
            rows.push(BenchRow {
                op: "dense_conv",
                h: s,
                w: s,
                c,
                density: 1.0,
                wall_ns_median: ns,
                mac_count: (s * s * c * c * KERNEL * KERNEL) as u64,
            });
            for &d in &cfg.densities {
                let mask = random_mask(s, s, d, &mut rng);
                let (ns, (_, macs)) = time_median(cfg.repeats, || sparse_conv_counted(&x, &mask, &conv))?;
                rows.push(BenchRow {
                    op: "sparse_conv",
                    h: s,
                    w: s,
                    c,
                    density: d,
                    wall_ns_median: ns,
                    mac_count: macs,
                });
                if cfg.include_snl {
                    let policy = SourcePolicy::CleanOnly;
                    let (ns, _) = time_median(cfg.repeats, || snl_step(&x, &mask, policy, &fusion))?;
                    rows.push(BenchRow {
                        op: "snl_step",
                        h: s,
                        w: s,
                        c,
                        density: d,
                        wall_ns_median: ns,
                        mac_count: snl_step_macs(&mask, policy, c, KERNEL),
                    });
                }
            }
        }
    }
    rows.sort_by(|a, b| a.key().partial_cmp(&b.key()).expect("densities are finite"));
    Ok(rows)
}

/// CSV text with a metadata comment line and a header.
pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("# threads=1 kernel=3 batch=1\nop,h,w,c,density,wall_ns_median,mac_count\n");
    for r in rows {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    out
}
