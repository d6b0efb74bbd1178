//! Tape-based reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Graph`] records every operation as a node appended in evaluation
//! order, so the node list is already a topological order. [`Graph::backward`]
//! walks it once in reverse. Masks are stored as constants and never receive
//! gradients.

mod gradcheck;

use std::sync::Arc;

pub use gradcheck::{check_instance, gradcheck, op_suite, GradCheckOptions, GradReport, SUITE_OPS};

use crate::error::{shape_err, Error, Result};
use crate::guided::attention::{attention_backward, attention_forward};
use crate::guided::pointwise::{pointwise_backward, pointwise_forward};
use crate::guided::sfm::{sfm_backward, sfm_forward};
use crate::guided::snl::{snl_aggregate_backward, snl_aggregate_forward, SourcePolicy};
use crate::guided::sparse_conv::{sparse_conv_backward, sparse_conv_forward};
use crate::scalar::Scalar;
use crate::tensor::stats::{plane_stats, softmax_in_place};
use crate::tensor::{conv2d_backward, conv2d_forward, upsample_nearest, Mask, Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Clamp range of probabilities inside the binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    SparseConv {
        x: Var,
        w: Var,
        b: Option<Var>,
        mask: Arc<Mask<T>>,
    },
    SparsePointwise {
        x: Var,
        w: Var,
        b: Var,
        mask: Arc<Mask<T>>,
    },
    Sfm {
        x: Var,
        mask: Arc<Mask<T>>,
    },
    SnlAggregate {
        f: Var,
        e: Var,
        mask: Arc<Mask<T>>,
        policy: SourcePolicy,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
    },
    MaskedResidual {
        base: Var,
        branch: Var,
        mask: Arc<Mask<T>>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Upsample(Var, usize),
    Sum(Var),
    Mean(Var),
    Project(Var, Arc<Tensor<T>>),
    Softmax(Var),
    MaskedMean(Var, Arc<Mask<T>>),
    MaskedStd(Var, Arc<Mask<T>>),
    L1(Var, Arc<Tensor<T>>),
    Bce(Var, Arc<Mask<T>>),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::SparseConv { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::SparsePointwise { x, w, b, .. } => vec![*x, *w, *b],
            Op::Sfm { x, .. } => vec![*x],
            Op::SnlAggregate { f, e, .. } => vec![*f, *e],
            Op::Attention { q, k, v } => vec![*q, *k, *v],
            Op::MaskedResidual { base, branch, .. } => vec![*base, *branch],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(v) => v.clone(),
            Op::Scale(a, _)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Upsample(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Project(a, _)
            | Op::Softmax(a)
            | Op::MaskedMean(a, _)
            | Op::MaskedStd(a, _)
            | Op::L1(a, _)
            | Op::Bce(a, _) => vec![*a],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a forward computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every node that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: Shape) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc
            .add_assign(&g)
            .map_err(|e| Error::Structural(format!("gradient accumulation: {e}"))),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let bias = b.map(|b| self.value(b).clone());
        let y = conv2d_forward(self.value(x), self.value(w), bias.as_ref(), stride, pad)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn sparse_conv(&mut self, x: Var, w: Var, b: Option<Var>, mask: &Arc<Mask<T>>) -> Result<Var> {
        let bias = b.map(|b| self.value(b).clone());
        let (y, _) = sparse_conv_forward(self.value(x), mask, self.value(w), bias.as_ref())?;
        Ok(self.push(
            y,
            Op::SparseConv {
                x,
                w,
                b,
                mask: Arc::clone(mask),
            },
        ))
    }

    pub fn sparse_pointwise(&mut self, x: Var, w: Var, b: Var, mask: &Arc<Mask<T>>) -> Result<Var> {
        let (y, _) = pointwise_forward(self.value(x), mask, self.value(w), self.value(b))?;
        Ok(self.push(
            y,
            Op::SparsePointwise {
                x,
                w,
                b,
                mask: Arc::clone(mask),
            },
        ))
    }

    /// Statistic-transfer modulation of already-fused features.
    pub fn sfm(&mut self, x: Var, mask: &Arc<Mask<T>>) -> Result<Var> {
        let y = sfm_forward(self.value(x), mask)?;
        Ok(self.push(
            y,
            Op::Sfm {
                x,
                mask: Arc::clone(mask),
            },
        ))
    }

    pub fn snl_aggregate(&mut self, f: Var, e: Var, mask: &Arc<Mask<T>>, policy: SourcePolicy) -> Result<Var> {
        let (y, _) = snl_aggregate_forward(self.value(f), self.value(e), mask, policy)?;
        Ok(self.push(
            y,
            Op::SnlAggregate {
                f,
                e,
                mask: Arc::clone(mask),
                policy,
            },
        ))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let y = attention_forward(self.value(q), self.value(k), self.value(v))?;
        Ok(self.push(y, Op::Attention { q, k, v }))
    }

    /// `base + branch` where the mask is set, `base` (bit-for-bit) elsewhere.
    pub fn masked_residual(&mut self, base: Var, branch: Var, mask: &Arc<Mask<T>>) -> Result<Var> {
        let b = self.value(base);
        let r = self.value(branch);
        b.check_same_shape(r, "masked residual")?;
        mask.check_matches(b.shape())?;
        let s = b.shape();
        let plane = s.plane();
        let mut y = b.clone();
        for n in 0..s.n {
            let m = mask.sample(n);
            let rs = r.sample(n);
            for (i, v) in y.sample_mut(n).iter_mut().enumerate() {
                if m[i % plane] == T::one() {
                    *v += rs[i];
                }
            }
        }
        Ok(self.push(
            y,
            Op::MaskedResidual {
                base,
                branch,
                mask: Arc::clone(mask),
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let y = self.value(a).scale(s);
        self.push(y, Op::Scale(a, s))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let y = self.value(a).map(|v| if v > T::zero() { v } else { v * slope });
        self.push(y, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(y, Op::Sigmoid(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat_channels(&vals)?;
        Ok(self.push(y, Op::Concat(parts.to_vec())))
    }

    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Var {
        let y = upsample_nearest(self.value(a), factor);
        self.push(y, Op::Upsample(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.value(a).sum());
        self.push(y, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let y = Tensor::scalar(v.sum() / T::lit(v.shape().numel() as f64));
        self.push(y, Op::Mean(a))
    }

    /// `sum(a * r)` for a constant tensor `r`.
    pub fn project(&mut self, a: Var, r: Arc<Tensor<T>>) -> Result<Var> {
        let y = Tensor::scalar(self.value(a).mul(&r)?.sum());
        Ok(self.push(y, Op::Project(a, r)))
    }

    /// Softmax over all elements of `a`.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.shape().numel() == 0 {
            return Err(Error::EmptySoftmax);
        }
        let mut y = v.clone();
        softmax_in_place(y.data_mut());
        Ok(self.push(y, Op::Softmax(a)))
    }

    /// Per-(sample, channel) masked mean, shape `(n, c, 1, 1)`.
    pub fn masked_mean(&mut self, a: Var, mask: &Arc<Mask<T>>) -> Result<Var> {
        let (mean, _) = masked_moments(self.value(a), mask)?;
        Ok(self.push(mean, Op::MaskedMean(a, Arc::clone(mask))))
    }

    /// Per-(sample, channel) masked standard deviation, shape `(n, c, 1, 1)`.
    pub fn masked_std(&mut self, a: Var, mask: &Arc<Mask<T>>) -> Result<Var> {
        let (_, std) = masked_moments(self.value(a), mask)?;
        Ok(self.push(std, Op::MaskedStd(a, Arc::clone(mask))))
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: Arc<Tensor<T>>) -> Result<Var> {
        let p = self.value(pred);
        p.check_same_shape(&target, "l1 loss")?;
        let total = p
            .data()
            .iter()
            .zip(target.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b).abs());
        let y = Tensor::scalar(total / T::lit(p.shape().numel() as f64));
        Ok(self.push(y, Op::L1(pred, target)))
    }

    /// Mean binary cross-entropy of a single-channel probability map against
    /// a binary mask. Probabilities are clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_loss(&mut self, prob: Var, target: Arc<Mask<T>>) -> Result<Var> {
        let p = self.value(prob);
        let s = p.shape();
        if s.c != 1 {
            return shape_err(format!("bce expects a single-channel map, got {s}"));
        }
        target.check_matches(s)?;
        let lo = T::lit(BCE_CLAMP);
        let hi = T::one() - lo;
        let total = p.data().iter().zip(target.data()).fold(T::zero(), |acc, (&pv, &y)| {
            let pc = pv.max(lo).min(hi);
            acc - (y * pc.ln() + (T::one() - y) * (T::one() - pc).ln())
        });
        let y = Tensor::scalar(total / T::lit(s.numel() as f64));
        Ok(self.push(y, Op::Bce(prob, target)))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls != Shape::scalar() {
            return Err(Error::Structural(format!("loss must be a scalar, got {ls}")));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let inputs = node.op.inputs();
            if inputs.iter().any(|i| i.0 >= idx) {
                return Err(Error::Structural(format!("node {idx} depends on a later node")));
            }
            let contributions = self.vjp(idx, &g)?;
            grads[idx] = Some(g);
            for (var, contrib) in contributions {
                if self.nodes[var.0].requires_grad {
                    let expect = self.shape(var);
                    if contrib.shape() != expect {
                        return Err(Error::Structural(format!(
                            "gradient shape {} for node of shape {expect}",
                            contrib.shape()
                        )));
                    }
                    accumulate(&mut grads[var.0], contrib)?;
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian product of node `idx` with upstream gradient `g`.
    fn vjp(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, self.needs(*x));
                if let Some(dx) = dx {
                    res.push((*x, dx));
                }
                res.push((*w, dw));
                if let Some(b) = b {
                    res.push((*b, db));
                }
            }
            Op::SparseConv { x, w, b, mask } => {
                let (dx, dw, db) = sparse_conv_backward(self.value(*x), mask, self.value(*w), g);
                res.push((*x, dx));
                res.push((*w, dw));
                if let Some(b) = b {
                    res.push((*b, db));
                }
            }
            Op::SparsePointwise { x, w, b, mask } => {
                let (dx, dw, db) = pointwise_backward(self.value(*x), mask, self.value(*w), g);
                res.push((*x, dx));
                res.push((*w, dw));
                res.push((*b, db));
            }
            Op::Sfm { x, mask } => res.push((*x, sfm_backward(self.value(*x), mask, g))),
            Op::SnlAggregate { f, e, mask, policy } => {
                let (df, de) = snl_aggregate_backward(self.value(*f), self.value(*e), mask, *policy, g);
                res.push((*f, df));
                res.push((*e, de));
            }
            Op::Attention { q, k, v } => {
                let (dq, dk, dv) = attention_backward(self.value(*q), self.value(*k), self.value(*v), g);
                res.push((*q, dq));
                res.push((*k, dk));
                res.push((*v, dv));
            }
            Op::MaskedResidual { base, branch, mask } => {
                res.push((*base, g.clone()));
                if self.needs(*branch) {
                    res.push((*branch, g.mul_mask(mask)?));
                }
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.scale(-T::one())));
            }
            Op::Mul(a, b) => {
                res.push((*a, g.mul(self.value(*b))?));
                res.push((*b, g.mul(self.value(*a))?));
            }
            Op::Scale(a, s) => res.push((*a, g.scale(*s))),
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                res.push((*a, g.zip_map(x, |gv, xv| if xv > T::zero() { gv } else { gv * *slope })?));
            }
            Op::Sigmoid(a) => res.push((*a, g.zip_map(out, |gv, y| gv * y * (T::one() - y))?)),
            Op::Concat(parts) => {
                let gs = g.shape();
                let plane = gs.plane();
                let mut c0 = 0;
                for p in parts {
                    let ps = self.shape(*p);
                    let mut piece = Tensor::zeros(ps);
                    for n in 0..gs.n {
                        piece
                            .sample_mut(n)
                            .copy_from_slice(&g.sample(n)[c0 * plane..(c0 + ps.c) * plane]);
                    }
                    c0 += ps.c;
                    res.push((*p, piece));
                }
            }
            Op::Upsample(a, factor) => {
                let s = self.shape(*a);
                let mut d = Tensor::zeros(s);
                let gw = s.w * factor;
                for (dst, src) in d.data_mut().chunks_mut(s.w).zip(g.data().chunks(gw * factor)) {
                    // one coarse row collects `factor` fine rows
                    for fine in src.chunks(gw) {
                        for (x, &v) in fine.iter().enumerate() {
                            dst[x / factor] += v;
                        }
                    }
                }
                res.push((*a, d));
            }
            Op::Sum(a) => res.push((*a, Tensor::full(self.shape(*a), g.data()[0]))),
            Op::Mean(a) => {
                let s = self.shape(*a);
                res.push((*a, Tensor::full(s, g.data()[0] / T::lit(s.numel() as f64))));
            }
            Op::Project(a, r) => res.push((*a, r.scale(g.data()[0]))),
            Op::Softmax(a) => {
                let dotv = g.data().iter().zip(out.data()).fold(T::zero(), |s, (&gv, &y)| s + gv * y);
                res.push((*a, g.zip_map(out, |gv, y| y * (gv - dotv))?));
            }
            Op::MaskedMean(a, mask) => res.push((*a, masked_mean_vjp(self.value(*a), mask, g))),
            Op::MaskedStd(a, mask) => res.push((*a, masked_std_vjp(self.value(*a), mask, out, g))),
            Op::L1(a, target) => {
                let p = self.value(*a);
                let scale = g.data()[0] / T::lit(p.shape().numel() as f64);
                res.push((
                    *a,
                    p.zip_map(target, |pv, tv| {
                        let d = pv - tv;
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })?,
                ));
            }
            Op::Bce(a, target) => {
                let p = self.value(*a);
                let scale = g.data()[0] / T::lit(p.shape().numel() as f64);
                let lo = T::lit(BCE_CLAMP);
                let hi = T::one() - lo;
                let t = target.to_tensor();
                res.push((
                    *a,
                    p.zip_map(&t, |pv, y| {
                        if pv < lo || pv > hi {
                            T::zero()
                        } else {
                            scale * (-y / pv + (T::one() - y) / (T::one() - pv))
                        }
                    })?,
                ));
            }
        }
        Ok(res)
    }
}

fn masked_moments<T: Scalar>(x: &Tensor<T>, mask: &Mask<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    mask.check_matches(s)?;
    let plane = s.plane();
    let mut mean = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    let mut std = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    for n in 0..s.n {
        for (c, q) in x.sample(n).chunks(plane).enumerate() {
            let (_, mu, sd) = plane_stats(q, mask.sample(n)).ok_or(Error::EmptyRegion)?;
            mean.set(n, c, 0, 0, mu);
            std.set(n, c, 0, 0, sd);
        }
    }
    Ok((mean, std))
}

fn masked_mean_vjp<T: Scalar>(x: &Tensor<T>, mask: &Mask<T>, g: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let mut d = Tensor::zeros(s);
    for n in 0..s.n {
        let m = mask.sample(n);
        let count = T::lit(mask.count_sample(n) as f64);
        for c in 0..s.c {
            let gv = g.at(n, c, 0, 0) / count;
            let dst = &mut d.sample_mut(n)[c * plane..(c + 1) * plane];
            for (o, &mv) in dst.iter_mut().zip(m) {
                *o = gv * mv;
            }
        }
    }
    d
}

fn masked_std_vjp<T: Scalar>(x: &Tensor<T>, mask: &Mask<T>, std: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let mut d = Tensor::zeros(s);
    for n in 0..s.n {
        let m = mask.sample(n);
        let count = T::lit(mask.count_sample(n) as f64);
        for c in 0..s.c {
            let q = &x.sample(n)[c * plane..(c + 1) * plane];
            let (_, mu, _) = plane_stats(q, m).expect("forward succeeded on this region");
            let coef = g.at(n, c, 0, 0) / (count * std.at(n, c, 0, 0));
            let dst = &mut d.sample_mut(n)[c * plane..(c + 1) * plane];
            for ((o, &mv), &qv) in dst.iter_mut().zip(m).zip(q) {
                *o = coef * (qv - mu) * mv;
            }
        }
    }
    d
}
