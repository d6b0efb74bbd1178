use std::fmt;
use std::sync::Arc;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::synth::rng::Rng;
use crate::guided::{snl_module, snl_step_graph, SnlModuleVars, SourcePolicy};
use crate::tensor::{Mask, Shape, Tensor};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub op: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub non_finite: bool,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        !self.non_finite && self.max_rel_err <= tol
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.non_finite {
            return write!(f, "{:<18} non-finite output at probe point", self.op);
        }
        write!(
            f,
            "{:<18} max_rel={:.3e} max_abs={:.3e} checked={}",
            self.op, self.max_rel_err, self.max_abs_err, self.checked
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Base step, scaled per element by `max(1, |x|)`.
    pub step: f64,
    /// Seed of the random projection that turns the output into a scalar.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, seed: 0x5eed }
    }
}

/// Relative error `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval<F>(build: &F, inputs: &[Tensor<f64>], proj: &Option<Arc<Tensor<f64>>>) -> Result<(f64, Option<Tensor<f64>>)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let value = g.value(out).clone();
    let loss = match proj {
        Some(r) => value.mul(r)?.sum(),
        None => value.sum(),
    };
    Ok((loss, Some(value)))
}

/// Check the gradient of `build(inputs)` with respect to every element of
/// every input. The output is reduced to a scalar by a fixed random
/// projection before differentiation.
pub fn gradcheck<F>(name: &str, inputs: &[Tensor<f64>], build: F, opts: GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let non_finite = || GradReport {
        op: name.to_string(),
        max_rel_err: f64::INFINITY,
        max_abs_err: f64::INFINITY,
        checked: 0,
        non_finite: true,
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    if !g.value(out).is_finite() {
        return Ok(non_finite());
    }
    let mut rng = Rng::new(opts.seed);
    let out_shape = g.shape(out);
    let proj = Arc::new(Tensor::from_fn(out_shape, |_, _, _, _| rng.uniform_in(-1.0, 1.0)));
    let loss = g.project(out, Arc::clone(&proj))?;
    let grads = g.backward(loss)?;

    let proj = Some(proj);
    let mut report = GradReport {
        op: name.to_string(),
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        non_finite: false,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, (&var, input)) in vars.iter().zip(inputs).enumerate() {
        let analytic = grads.get_or_zeros(var, input.shape());
        for j in 0..input.data().len() {
            let x0 = input.data()[j];
            let h = opts.step * x0.abs().max(1.0);
            probe[i].data_mut()[j] = x0 + h;
            let (fp, vp) = eval(&build, &probe, &proj)?;
            probe[i].data_mut()[j] = x0 - h;
            let (fm, vm) = eval(&build, &probe, &proj)?;
            probe[i].data_mut()[j] = x0;
            let finite = |v: &Option<Tensor<f64>>| v.as_ref().is_none_or(Tensor::is_finite);
            if !fp.is_finite() || !fm.is_finite() || !finite(&vp) || !finite(&vm) {
                return Ok(non_finite());
            }
            let numeric = (fp - fm) / (2.0 * h);
            let ad = analytic.data()[j];
            report.max_abs_err = report.max_abs_err.max((ad - numeric).abs());
            report.max_rel_err = report.max_rel_err.max(relative_error(ad, numeric));
            report.checked += 1;
        }
    }
    if report.checked == 0 {
        return Err(Error::InvalidArgument("gradcheck needs at least one input element".into()));
    }
    Ok(report)
}

/// Ops covered by [`op_suite`], in report order.
pub const SUITE_OPS: [&str; 13] = [
    "dense_conv",
    "strided_conv",
    "softmax",
    "masked_mean",
    "masked_std",
    "sfm",
    "sparse_conv",
    "sparse_pointwise",
    "snl_step",
    "snl_module",
    "attention",
    "l1",
    "bce",
];

fn rand_tensor(rng: &mut Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.uniform_in(lo, hi))
}

/// Mask with roughly `density` of the pixels set, forced to contain at least
/// one set and one clear pixel per sample.
fn rand_mask(rng: &mut Rng, n: usize, h: usize, w: usize, density: f64) -> Arc<Mask<f64>> {
    let mut m = Mask::from_fn(n, h, w, |_, _, _| rng.uniform() < density);
    for i in 0..n {
        m.set(i, 0, 0, true);
        m.set(i, h - 1, w - 1, false);
    }
    Arc::new(m)
}

/// Gradient check of one random instance of `op`.
pub fn check_instance(op: &str, rng: &mut Rng) -> Result<GradReport> {
    let opts = GradCheckOptions {
        seed: rng.next_u64(),
        ..GradCheckOptions::default()
    };
    let c = 1 + rng.below(3) as usize;
    let (h, w) = (4 + rng.below(3) as usize, 4 + rng.below(3) as usize);
    let x = rand_tensor(rng, Shape::new(2, c, h, w), -1.0, 1.0);
    let density = rng.uniform_in(0.2, 0.7);
    let mask = rand_mask(rng, 2, h, w, density);
    let m = &mask;
    match op {
        "dense_conv" | "strided_conv" => {
            let k = if rng.coin() { 3 } else { 1 };
            let stride = if op == "strided_conv" { 2 } else { 1 };
            let wt = rand_tensor(rng, Shape::new(2, c, k, k), -0.5, 0.5);
            let b = rand_tensor(rng, Shape::new(1, 2, 1, 1), -0.5, 0.5);
            gradcheck(op, &[x, wt, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, k / 2), opts)
        }
        "softmax" => {
            let s = rand_tensor(rng, Shape::new(1, 1, 1, 8), -2.0, 2.0);
            gradcheck(op, &[s], |g, v| g.softmax(v[0]), opts)
        }
        "masked_mean" => gradcheck(op, &[x], |g, v| g.masked_mean(v[0], m), opts),
        "masked_std" => gradcheck(op, &[x], |g, v| g.masked_std(v[0], m), opts),
        "sfm" => gradcheck(op, &[x], |g, v| g.sfm(v[0], m), opts),
        "sparse_conv" => {
            let k = [1, 3, 5][rng.below(3) as usize];
            let wt = rand_tensor(rng, Shape::new(2, c, k, k), -0.5, 0.5);
            let b = rand_tensor(rng, Shape::new(1, 2, 1, 1), -0.5, 0.5);
            gradcheck(op, &[x, wt, b], |g, v| g.sparse_conv(v[0], v[1], Some(v[2]), m), opts)
        }
        "sparse_pointwise" => {
            let wt = rand_tensor(rng, Shape::new(c, c, 1, 1), -0.5, 0.5);
            let b = rand_tensor(rng, Shape::new(1, c, 1, 1), -0.5, 0.5);
            gradcheck(op, &[x, wt, b], |g, v| g.sparse_pointwise(v[0], v[1], v[2], m), opts)
        }
        "snl_step" => {
            let policy = if rng.coin() { SourcePolicy::CleanOnly } else { SourcePolicy::AllPixels };
            let wt = rand_tensor(rng, Shape::new(4, c, 3, 3), -0.5, 0.5);
            let b = rand_tensor(rng, Shape::new(1, 4, 1, 1), -0.5, 0.5);
            gradcheck(op, &[x, wt, b], |g, v| snl_step_graph(g, v[0], m, (v[1], v[2]), policy), opts)
        }
        "snl_module" => {
            let policy = if rng.coin() { SourcePolicy::CleanOnly } else { SourcePolicy::AllPixels };
            let inputs = vec![
                x,
                rand_tensor(rng, Shape::new(4, c, 3, 3), -0.5, 0.5),
                rand_tensor(rng, Shape::new(1, 4, 1, 1), -0.5, 0.5),
                rand_tensor(rng, Shape::new(c, c, 1, 1), -0.5, 0.5),
                rand_tensor(rng, Shape::new(1, c, 1, 1), -0.5, 0.5),
                rand_tensor(rng, Shape::new(4, c, 3, 3), -0.5, 0.5),
                rand_tensor(rng, Shape::new(1, 4, 1, 1), -0.5, 0.5),
            ];
            gradcheck(
                op,
                &inputs,
                |g, v| {
                    let p = SnlModuleVars {
                        fusion1: (v[1], v[2]),
                        connector: (v[3], v[4]),
                        fusion2: (v[5], v[6]),
                        policy,
                    };
                    snl_module(g, v[0], m, &p)
                },
                opts,
            )
        }
        "attention" => {
            let q = rand_tensor(rng, Shape::new(2, 2, h, w), -1.0, 1.0);
            let k = rand_tensor(rng, Shape::new(2, 2, h, w), -1.0, 1.0);
            gradcheck(op, &[q, k, x], |g, v| g.attention(v[0], v[1], v[2]), opts)
        }
        "l1" => {
            let target = Arc::new(rand_tensor(rng, x.shape(), -1.0, 1.0));
            // keep every residual away from the kink at zero
            let pred = Tensor::from_fn(x.shape(), |n, ch, y, xx| {
                let t = target.at(n, ch, y, xx);
                let d = x.at(n, ch, y, xx);
                t + d.signum() * (0.05 + d.abs())
            });
            gradcheck(op, &[pred], |g, v| g.l1_loss(v[0], Arc::clone(&target)), opts)
        }
        "bce" => {
            let prob = rand_tensor(rng, Shape::new(2, 1, h, w), 0.05, 0.95);
            gradcheck(op, &[prob], |g, v| g.bce_loss(v[0], Arc::clone(m)), opts)
        }
        other => Err(Error::InvalidArgument(format!("no gradient check for op `{other}`"))),
    }
}

/// Worst case over `instances` random instances of every op in
/// [`SUITE_OPS`].
pub fn op_suite(instances: usize, seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = Rng::new(seed);
    SUITE_OPS
        .iter()
        .map(|&op| {
            let mut worst = GradReport {
                op: op.to_string(),
                max_rel_err: 0.0,
                max_abs_err: 0.0,
                checked: 0,
                non_finite: false,
            };
            for _ in 0..instances.max(1) {
                let r = check_instance(op, &mut rng)?;
                worst.max_rel_err = worst.max_rel_err.max(r.max_rel_err);
                worst.max_abs_err = worst.max_abs_err.max(r.max_abs_err);
                worst.checked += r.checked;
                worst.non_finite |= r.non_finite;
            }
            Ok(worst)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_passes() {
        let x = Tensor::from_fn(Shape::new(1, 1, 2, 3), |_, _, y, x| 0.3 * y as f64 - 0.2 * x as f64 + 0.1);
        let r = gradcheck("square", &[x], |g, v| g.mul(v[0], v[0]), GradCheckOptions::default()).unwrap();
        assert!(r.passes(1e-7), "{r}");
        assert_eq!(r.checked, 6);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn suite_passes_once() {
        for r in op_suite(1, 11).unwrap() {
            assert!(r.passes(1e-4), "{r}");
        }
    }
}
