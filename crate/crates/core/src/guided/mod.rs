//! Distortion-guided operators: statistic-transfer modulation (SFM), masked
//! sparse convolution (SC), sparse point-wise mixing and directional sparse
//! non-local attention (SNL), plus the SC block and two-step SNL module
//! built from them.
//!
//! Every composite keeps clean pixels bit-for-bit: branch outputs rejoin the
//! trunk through [`Graph::masked_residual`].

pub(crate) mod attention;
pub(crate) mod pointwise;
pub(crate) mod sfm;
pub(crate) mod snl;
pub(crate) mod sparse_conv;

use std::sync::Arc;

pub use pointwise::{sparse_pointwise, sparse_pointwise_macs};
pub use sfm::sfm_modulate;
pub use snl::{snl_aggregate, snl_aggregate_macs, Direction, SourcePolicy};
pub use sparse_conv::{sparse_conv, sparse_conv_counted, sparse_conv_macs};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvParams, Mask, Shape, Tensor};

/// Negative slope of every hidden activation.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Number of sparse convolutions in an SC block.
pub const SC_LAYERS: usize = 6;

/// Parameter handles of an SC block inside a [`Graph`].
#[derive(Clone, Debug)]
pub struct ScBlockVars {
    /// `(weight, bias)` of each 3x3 sparse convolution.
    pub layers: Vec<(Var, Var)>,
    /// `(weight, bias)` of the closing sparse 1x1 reduction.
    pub reduce: (Var, Var),
}

/// Parameter handles of an SNL module inside a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct SnlModuleVars {
    pub fusion1: (Var, Var),
    pub connector: (Var, Var),
    pub fusion2: (Var, Var),
    pub policy: SourcePolicy,
}

/// Densely connected sparse convolutions followed by a sparse 1x1
/// reduction, added residually at masked pixels.
pub fn sc_block<T: Scalar>(g: &mut Graph<T>, x: Var, mask: &Arc<Mask<T>>, p: &ScBlockVars) -> Result<Var> {
    let slope = T::lit(LEAKY_SLOPE);
    let mut feats = vec![x];
    for &(w, b) in &p.layers {
        let input = if feats.len() == 1 { x } else { g.concat(&feats)? };
        let y = g.sparse_conv(input, w, Some(b), mask)?;
        let y = g.leaky_relu(y, slope);
        feats.push(y);
    }
    let all = g.concat(&feats)?;
    let branch = g.sparse_conv(all, p.reduce.0, Some(p.reduce.1), mask)?;
    g.masked_residual(x, branch, mask)
}

/// One attention step: fusion weights from a dense 3x3 convolution, then
/// directional aggregation added residually at masked pixels.
pub fn snl_step_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    mask: &Arc<Mask<T>>,
    fusion: (Var, Var),
    policy: SourcePolicy,
) -> Result<Var> {
    let k = g.shape(fusion.0).h;
    let e = g.conv2d(x, fusion.0, Some(fusion.1), 1, k / 2)?;
    let h = g.snl_aggregate(x, e, mask, policy)?;
    g.masked_residual(x, h, mask)
}

/// Step one with clean sources, a sparse 1x1 connector, then step two with
/// the configured source policy.
pub fn snl_module<T: Scalar>(g: &mut Graph<T>, x: Var, mask: &Arc<Mask<T>>, p: &SnlModuleVars) -> Result<Var> {
    let s1 = snl_step_graph(g, x, mask, p.fusion1, SourcePolicy::CleanOnly)?;
    let mid = g.sparse_pointwise(s1, p.connector.0, p.connector.1, mask)?;
    snl_step_graph(g, mid, mask, p.fusion2, p.policy)
}

/// Parameters of an SC block.
#[derive(Clone, Debug)]
pub struct ScBlock<T> {
    pub layers: Vec<ConvParams<T>>,
    pub reduce: ConvParams<T>,
}

impl<T: Scalar> ScBlock<T> {
    /// Block over `channels` inputs with `growth` channels per layer, with
    /// weights drawn from `init(shape)`.
    pub fn from_fn(channels: usize, growth: usize, mut init: impl FnMut(Shape) -> Tensor<T>) -> Result<Self> {
        let mut layers = Vec::with_capacity(SC_LAYERS);
        for i in 0..SC_LAYERS {
            let cin = channels + i * growth;
            let w = init(Shape::new(growth, cin, 3, 3));
            let b = init(Shape::new(1, growth, 1, 1));
            layers.push(ConvParams::new(w, b, 1, 1)?);
        }
        let cin = channels + SC_LAYERS * growth;
        let w = init(Shape::new(channels, cin, 1, 1));
        let b = init(Shape::new(1, channels, 1, 1));
        Ok(Self {
            layers,
            reduce: ConvParams::new(w, b, 1, 0)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.reduce.c_out()
    }

    fn validate(&self, c: usize) -> Result<()> {
        if self.layers.len() != SC_LAYERS {
            return shape_err(format!("SC block needs {SC_LAYERS} layers, got {}", self.layers.len()));
        }
        let mut cin = c;
        for (i, l) in self.layers.iter().enumerate() {
            l.validate()?;
            if l.c_in() != cin {
                return shape_err(format!("SC layer {i} expects {} inputs, block provides {cin}", l.c_in()));
            }
            cin += l.c_out();
        }
        if self.reduce.c_in() != cin || self.reduce.c_out() != c || self.reduce.kernel() != 1 {
            return shape_err(format!(
                "SC reduction must be {c}x{cin}x1x1, got {}",
                self.reduce.weight.shape()
            ));
        }
        Ok(())
    }

    fn load(&self, g: &mut Graph<T>) -> ScBlockVars {
        let mut pair = |p: &ConvParams<T>| (g.constant(p.weight.clone()), g.constant(p.bias.clone()));
        ScBlockVars {
            layers: self.layers.iter().map(&mut pair).collect(),
            reduce: pair(&self.reduce),
        }
    }
}

/// Parameters of a two-step SNL module.
#[derive(Clone, Debug)]
pub struct SnlModule<T> {
    pub fusion1: ConvParams<T>,
    /// `(c, c, 1, 1)` weight and `(1, c, 1, 1)` bias of the sparse connector.
    pub connector: (Tensor<T>, Tensor<T>),
    pub fusion2: ConvParams<T>,
    pub policy: SourcePolicy,
}

impl<T: Scalar> SnlModule<T> {
    pub fn from_fn(channels: usize, policy: SourcePolicy, mut init: impl FnMut(Shape) -> Tensor<T>) -> Result<Self> {
        let fusion = |init: &mut dyn FnMut(Shape) -> Tensor<T>| {
            ConvParams::same(init(Shape::new(4, channels, 3, 3))).and_then(|p| {
                let b = init(Shape::new(1, 4, 1, 1));
                ConvParams::new(p.weight, b, 1, 1)
            })
        };
        let fusion1 = fusion(&mut init)?;
        let connector = (
            init(Shape::new(channels, channels, 1, 1)),
            init(Shape::new(1, channels, 1, 1)),
        );
        let fusion2 = fusion(&mut init)?;
        Ok(Self {
            fusion1,
            connector,
            fusion2,
            policy,
        })
    }

    fn validate(&self, c: usize) -> Result<()> {
        for f in [&self.fusion1, &self.fusion2] {
            check_fusion(f, c)?;
        }
        Ok(())
    }

    fn load(&self, g: &mut Graph<T>) -> SnlModuleVars {
        let mut pair = |w: &Tensor<T>, b: &Tensor<T>| (g.constant(w.clone()), g.constant(b.clone()));
        SnlModuleVars {
            fusion1: pair(&self.fusion1.weight, &self.fusion1.bias),
            connector: pair(&self.connector.0, &self.connector.1),
            fusion2: pair(&self.fusion2.weight, &self.fusion2.bias),
            policy: self.policy,
        }
    }
}

fn check_fusion<T: Scalar>(f: &ConvParams<T>, c: usize) -> Result<()> {
    f.validate()?;
    if f.c_out() != 4 {
        return shape_err(format!("fusion convolution must produce 4 channels, got {}", f.c_out()));
    }
    if f.c_in() != c || f.stride != 1 || f.padding != f.kernel() / 2 {
        return shape_err(format!(
            "fusion convolution {} with stride {} padding {} does not fit {c} channels",
            f.weight.shape(),
            f.stride,
            f.padding
        ));
    }
    Ok(())
}

fn run<T: Scalar>(
    features: &Tensor<T>,
    mask: &Mask<T>,
    body: impl FnOnce(&mut Graph<T>, Var, &Arc<Mask<T>>) -> Result<Var>,
) -> Result<Tensor<T>> {
    mask.check_matches(features.shape())?;
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let m = Arc::new(mask.clone());
    let y = body(&mut g, x, &m)?;
    Ok(g.value(y).clone())
}

/// SC block on fixed parameters.
pub fn sc_block_forward<T: Scalar>(features: &Tensor<T>, mask: &Mask<T>, block: &ScBlock<T>) -> Result<Tensor<T>> {
    block.validate(features.shape().c)?;
    run(features, mask, |g, x, m| {
        let vars = block.load(g);
        sc_block(g, x, m, &vars)
    })
}

/// One SNL step on fixed parameters: `F + M * h`.
pub fn snl_step<T: Scalar>(
    features: &Tensor<T>,
    mask: &Mask<T>,
    policy: SourcePolicy,
    fusion: &ConvParams<T>,
) -> Result<Tensor<T>> {
    check_fusion(fusion, features.shape().c)?;
    run(features, mask, |g, x, m| {
        let w = g.constant(fusion.weight.clone());
        let b = g.constant(fusion.bias.clone());
        snl_step_graph(g, x, m, (w, b), policy)
    })
}

/// Full two-step SNL module on fixed parameters.
pub fn snl_module_forward<T: Scalar>(features: &Tensor<T>, mask: &Mask<T>, module: &SnlModule<T>) -> Result<Tensor<T>> {
    module.validate(features.shape().c)?;
    run(features, mask, |g, x, m| {
        let vars = module.load(g);
        snl_module(g, x, m, &vars)
    })
}

/// MAC count of one SNL step: the dense fusion convolution plus the
/// directional aggregation.
pub fn snl_step_macs<T: Scalar>(mask: &Mask<T>, policy: SourcePolicy, channels: usize, fusion_kernel: usize) -> u64 {
    let fusion = (mask.n() * mask.h() * mask.w() * 4 * channels * fusion_kernel * fusion_kernel) as u64;
    fusion + snl_aggregate_macs(mask, policy, channels)
}

/// Channel-major `(c, plane)` to pixel-major `(plane, c)`.
pub(crate) fn to_pixel_major<T: Scalar>(src: &[T], c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for (ch, row) in src.chunks_exact(plane).enumerate().take(c) {
        for (p, &v) in row.iter().enumerate() {
            out[p * c + ch] = v;
        }
    }
    out
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::rng::Rng;

    fn rand_tensor(rng: &mut Rng, s: Shape, scale: f64) -> Tensor<f64> {
        Tensor::from_fn(s, |_, _, _, _| rng.uniform_in(-scale, scale))
    }

    fn rand_mask(rng: &mut Rng, n: usize, h: usize, w: usize, d: f64) -> Mask<f64> {
        Mask::from_fn(n, h, w, |_, _, _| rng.uniform() < d)
    }

    #[test]
    fn sc_block_empty_mask_is_identity() {
        let mut rng = Rng::new(1);
        let f = rand_tensor(&mut rng, Shape::new(1, 4, 6, 6), 1.0);
        let block = ScBlock::from_fn(4, 3, |s| rand_tensor(&mut rng, s, 0.3)).unwrap();
        let y = sc_block_forward(&f, &Mask::zeros(1, 6, 6), &block).unwrap();
        assert_eq!(y, f);
    }

    #[test]
    fn sc_block_keeps_clean_pixels() {
        let mut rng = Rng::new(2);
        let f = rand_tensor(&mut rng, Shape::new(2, 3, 5, 7), 1.0);
        let m = rand_mask(&mut rng, 2, 5, 7, 0.4);
        let block = ScBlock::from_fn(3, 2, |s| rand_tensor(&mut rng, s, 0.3)).unwrap();
        let y = sc_block_forward(&f, &m, &block).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for yy in 0..5 {
                    for x in 0..7 {
                        if !m.get(n, yy, x) {
                            assert_eq!(y.at(n, c, yy, x).to_bits(), f.at(n, c, yy, x).to_bits());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sc_block_rejects_wrong_width() {
        let mut rng = Rng::new(3);
        let block = ScBlock::from_fn(4, 2, |s| rand_tensor(&mut rng, s, 0.3)).unwrap();
        let f = Tensor::zeros(Shape::new(1, 3, 4, 4));
        assert!(sc_block_forward(&f, &Mask::ones(1, 4, 4), &block).is_err());
    }

    #[test]
    fn snl_module_zero_fusion_identity_connector() {
        let mut rng = Rng::new(4);
        let c = 3;
        let f = rand_tensor(&mut rng, Shape::new(1, c, 6, 6), 1.0);
        let m = rand_mask(&mut rng, 1, 6, 6, 0.5);
        let mut module = SnlModule::from_fn(c, SourcePolicy::AllPixels, Tensor::zeros).unwrap();
        module.connector.0 = Tensor::from_fn(Shape::new(c, c, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        let y = snl_module_forward(&f, &m, &module).unwrap();
        assert_eq!(y, f);
    }

    #[test]
    fn snl_step_rejects_bad_fusion() {
        let f = Tensor::<f64>::zeros(Shape::new(1, 2, 4, 4));
        let fusion = ConvParams::same(Tensor::zeros(Shape::new(3, 2, 3, 3))).unwrap();
        let r = snl_step(&f, &Mask::ones(1, 4, 4), SourcePolicy::CleanOnly, &fusion);
        assert!(r.is_err());
    }
}
