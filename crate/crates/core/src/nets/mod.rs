//! Localization and restoration networks and the five-step ablation ladder.
//!
//! Both networks share a U-shaped dense encoder-decoder: a 3x3 head, per
//! level a dense block with a linear 1x1 transition and a stride-2 3x3
//! convolution, a dense bottleneck, and per decoder level a nearest 2x
//! upsample, 3x3 convolution, skip concatenation and 1x1 merge. The
//! restoration network adds, depending on the variant, statistic-transfer
//! modulation before every strided convolution, SC blocks in place of the
//! decoder dense blocks, a global non-local layer, or SNL modules.
//!
//! Parameter paths follow the layer layout, e.g. `enc.l1.dense.3.conv.weight`.

mod params;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

pub use params::ParamStore;

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::guided::{sc_block, snl_module, ScBlockVars, SnlModuleVars, SourcePolicy, LEAKY_SLOPE, SC_LAYERS};
use crate::scalar::Scalar;
use crate::synth::rng::Rng;
use crate::tensor::{downsample_mask, Mask, Shape, Tensor};

/// Probability above which a localization output counts as degraded.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Largest allowed relative mismatch between the widened Net1 budget and
/// Net2 plus the localization network.
pub const BUDGET_TOLERANCE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Dense encoder-decoder.
    Net1,
    /// Net1 with statistic-transfer modulation.
    Net2,
    /// Net2 with SC blocks in the decoder.
    Net3,
    /// Net3 with one unmasked non-local layer.
    Net4,
    /// Net3 with SNL modules.
    Net5,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Net1, Variant::Net2, Variant::Net3, Variant::Net4, Variant::Net5];

    pub fn has_sfm(self) -> bool {
        self >= Variant::Net2
    }

    pub fn has_sc(self) -> bool {
        self >= Variant::Net3
    }

    pub fn has_nl(self) -> bool {
        self == Variant::Net4
    }

    pub fn has_snl(self) -> bool {
        self == Variant::Net5
    }

    pub fn uses_mask(self) -> bool {
        self.has_sfm()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Net{}", *self as usize + 1)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant '{s}' (expected Net1..Net5)")))
    }
}

/// Size and variant of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetSpec {
    pub levels: usize,
    pub base_channels: usize,
    pub dense_depth: usize,
    pub growth: usize,
    pub sc_growth: usize,
    pub variant: Variant,
    pub snl_policy: SourcePolicy,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 16,
            dense_depth: 4,
            growth: 8,
            sc_growth: 8,
            variant: Variant::Net5,
            snl_policy: SourcePolicy::CleanOnly,
        }
    }
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.levels == 0 || self.levels > 6 {
            return bad("levels must lie in 1..=6");
        }
        if self.base_channels < 2 {
            return bad("base_channels must be at least 2");
        }
        if self.dense_depth == 0 || self.growth == 0 || self.sc_growth == 0 {
            return bad("dense_depth, growth and sc_growth must be positive");
        }
        Ok(())
    }

    /// Channel width at level `l`.
    pub fn width(&self, l: usize) -> usize {
        self.base_channels << l
    }

    /// Image sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels
    }

    /// The lighter localization spec: half the base width and half the
    /// dense-block depth.
    pub fn localizer(&self) -> NetSpec {
        NetSpec {
            base_channels: (self.base_channels / 2).max(1),
            dense_depth: (self.dense_depth / 2).max(1),
            variant: Variant::Net1,
            ..*self
        }
    }

    pub fn check_image(&self, s: Shape, channels: usize) -> Result<()> {
        if s.c != channels {
            return shape_err(format!("expected {channels}-channel input, got {s}"));
        }
        let m = self.size_multiple();
        if s.h % m != 0 || s.w % m != 0 {
            let pad = |v: usize| (m - v % m) % m;
            return Err(Error::InvalidArgument(format!(
                "image {}x{} is not divisible by {m}; pad by {} rows and {} columns",
                s.h,
                s.w,
                pad(s.h),
                pad(s.w)
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Localize,
    Restore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModuleKind {
    DenseBlock,
    Sfm,
    ScBlock,
    NonLocal,
    SnlModule,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleInfo {
    pub path: String,
    pub kind: ModuleKind,
}

#[derive(Clone, Copy)]
enum Init {
    /// Uniform with bound `sqrt(6 / ((1 + slope^2) fan_in))`.
    FanIn,
    Zero,
}

struct Layout {
    params: Vec<(String, Shape, Init)>,
    modules: Vec<ModuleInfo>,
}

impl Layout {
    fn conv(&mut self, path: &str, cin: usize, cout: usize, k: usize, init: Init) {
        self.params.push((format!("{path}.weight"), Shape::new(cout, cin, k, k), init));
        self.params.push((format!("{path}.bias"), Shape::new(1, cout, 1, 1), Init::Zero));
    }

    fn module(&mut self, path: String, kind: ModuleKind) {
        self.modules.push(ModuleInfo { path, kind });
    }

    fn dense(&mut self, prefix: &str, c: usize, depth: usize, growth: usize) {
        for i in 0..depth {
            self.conv(&format!("{prefix}.dense.{i}.conv"), c + i * growth, growth, 3, Init::FanIn);
        }
        self.conv(&format!("{prefix}.trans"), c + depth * growth, c, 1, Init::FanIn);
        self.module(format!("{prefix}.dense"), ModuleKind::DenseBlock);
    }

    fn build(spec: &NetSpec, role: Role) -> Self {
        let mut lay = Layout {
            params: Vec::new(),
            modules: Vec::new(),
        };
        let v = match role {
            Role::Localize => Variant::Net1,
            Role::Restore => spec.variant,
        };
        let loc = spec.localizer();
        let (d, g, levels) = (spec.dense_depth, spec.growth, spec.levels);
        lay.conv("head", 3, spec.width(0), 3, Init::FanIn);
        for l in 0..levels {
            let c = spec.width(l);
            lay.dense(&format!("enc.l{l}"), c, d, g);
            if v.has_sfm() {
                lay.conv(&format!("enc.l{l}.sfm.proj"), loc.width(l), c, 1, Init::FanIn);
                lay.module(format!("enc.l{l}.sfm"), ModuleKind::Sfm);
            }
            lay.conv(&format!("enc.l{l}.down"), c, spec.width(l + 1), 3, Init::FanIn);
        }
        lay.dense("mid", spec.width(levels), d, g);
        for l in (0..levels).rev() {
            let c = spec.width(l);
            let p = format!("dec.l{l}");
            lay.conv(&format!("{p}.up"), spec.width(l + 1), c, 3, Init::FanIn);
            lay.conv(&format!("{p}.merge"), 2 * c, c, 1, Init::FanIn);
            if v.has_sc() {
                let sg = spec.sc_growth;
                for i in 0..SC_LAYERS {
                    lay.conv(&format!("{p}.sc.{i}.conv"), c + i * sg, sg, 3, Init::FanIn);
                }
                lay.conv(&format!("{p}.sc.reduce"), c + SC_LAYERS * sg, c, 1, Init::FanIn);
                lay.module(format!("{p}.sc"), ModuleKind::ScBlock);
            } else {
                lay.dense(&p, c, d, g);
            }
            if v.has_nl() && l + 1 == levels {
                let inner = (c / 2).max(1);
                for name in ["query", "key", "value"] {
                    lay.conv(&format!("{p}.nl.{name}"), c, inner, 1, Init::FanIn);
                }
                lay.conv(&format!("{p}.nl.out"), inner, c, 1, Init::Zero);
                lay.module(format!("{p}.nl"), ModuleKind::NonLocal);
            }
            if v.has_snl() {
                lay.conv(&format!("{p}.snl.fusion1"), c, 4, 3, Init::Zero);
                lay.conv(&format!("{p}.snl.connector"), c, c, 1, Init::FanIn);
                lay.conv(&format!("{p}.snl.fusion2"), c, 4, 3, Init::Zero);
                lay.module(format!("{p}.snl"), ModuleKind::SnlModule);
            }
        }
        match role {
            Role::Localize => lay.conv("tail", spec.width(0), 1, 3, Init::FanIn),
            // starts as the identity through the global residual
            Role::Restore => lay.conv("tail", spec.width(0), 3, 3, Init::Zero),
        }
        lay
    }
}

/// Number of scalar parameters a network of `spec` and `role` would have.
pub fn param_count(spec: &NetSpec, role: Role) -> usize {
    Layout::build(spec, role).params.iter().map(|(_, s, _)| s.numel()).sum()
}

/// Spec of one rung of the ablation ladder. Net1 is widened (base width and
/// growth) so that its parameter count matches Net2 plus the localization
/// network as closely as possible.
pub fn ablation_variant(spec: &NetSpec, variant: Variant) -> Result<NetSpec> {
    spec.validate()?;
    let with = NetSpec { variant, ..*spec };
    if variant != Variant::Net1 {
        return Ok(with);
    }
    let target = (param_count(&NetSpec { variant: Variant::Net2, ..*spec }, Role::Restore)
        + param_count(&spec.localizer(), Role::Localize)) as f64;
    let mut best = (f64::INFINITY, with);
    for base in spec.base_channels..=2 * spec.base_channels {
        for growth in spec.growth..=2 * spec.growth {
            let cand = NetSpec {
                base_channels: base,
                growth,
                ..with
            };
            let err = (param_count(&cand, Role::Restore) as f64 - target).abs() / target;
            if err < best.0 {
                best = (err, cand);
            }
        }
    }
    Ok(best.1)
}

/// A built network: spec, role, parameters and module inventory.
#[derive(Clone, Debug, PartialEq)]
pub struct Net<T> {
    spec: NetSpec,
    role: Role,
    params: ParamStore<T>,
    modules: Vec<ModuleInfo>,
}

/// Guidance for a restoration forward inside a graph: the full-resolution
/// mask and one localization feature per encoder level.
pub struct GraphGuide<'a, T> {
    pub mask: &'a Mask<T>,
    pub features: &'a [Var],
}

/// Result of a graph forward.
pub struct GraphOutput {
    pub output: Var,
    /// Encoder features per level, before modulation.
    pub features: Vec<Var>,
}

struct Fwd<'a, T> {
    g: &'a mut Graph<T>,
    vars: &'a [Var],
    store: &'a ParamStore<T>,
}

impl<T: Scalar> Fwd<'_, T> {
    fn p(&self, name: &str) -> Result<Var> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Structural(format!("missing parameter '{name}'")))
    }

    fn wb(&self, path: &str) -> Result<(Var, Var)> {
        Ok((self.p(&format!("{path}.weight"))?, self.p(&format!("{path}.bias"))?))
    }

    fn conv(&mut self, path: &str, x: Var, stride: usize) -> Result<Var> {
        let (w, b) = self.wb(path)?;
        let k = self.g.shape(w).h;
        self.g.conv2d(x, w, Some(b), stride, k / 2)
    }

    fn act(&mut self, x: Var) -> Var {
        self.g.leaky_relu(x, T::lit(LEAKY_SLOPE))
    }

    fn conv_act(&mut self, path: &str, x: Var, stride: usize) -> Result<Var> {
        let y = self.conv(path, x, stride)?;
        Ok(self.act(y))
    }

    fn dense(&mut self, prefix: &str, x: Var, depth: usize) -> Result<Var> {
        let mut feats = vec![x];
        for i in 0..depth {
            let input = if i == 0 { x } else { self.g.concat(&feats)? };
            let y = self.conv_act(&format!("{prefix}.dense.{i}.conv"), input, 1)?;
            feats.push(y);
        }
        let all = self.g.concat(&feats)?;
        self.conv_act(&format!("{prefix}.trans"), all, 1)
    }
}

impl<T: Scalar> Net<T> {
    fn build(spec: &NetSpec, role: Role, seed: u64) -> Result<Self> {
        spec.validate()?;
        let lay = Layout::build(spec, role);
        let mut rng = Rng::new(seed);
        let mut params = ParamStore::new();
        let gain = 6.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE);
        for (name, shape, init) in lay.params {
            let t = match init {
                Init::Zero => Tensor::zeros(shape),
                Init::FanIn => {
                    let bound = (gain / (shape.c * shape.h * shape.w) as f64).sqrt();
                    Tensor::from_fn(shape, |_, _, _, _| T::lit(rng.uniform_in(-bound, bound)))
                }
            };
            params.insert(name, t)?;
        }
        Ok(Self {
            spec: *spec,
            role,
            params,
            modules: lay.modules,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn variant(&self) -> Variant {
        match self.role {
            Role::Localize => Variant::Net1,
            Role::Restore => self.spec.variant,
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn modules(&self) -> &[ModuleInfo] {
        &self.modules
    }

    pub fn count_modules(&self, kind: ModuleKind) -> usize {
        self.modules.iter().filter(|m| m.kind == kind).count()
    }

    /// Names of the features exposed per encoder level.
    pub fn feature_names(&self) -> Vec<String> {
        (0..self.spec.levels).map(|l| format!("enc.l{l}")).collect()
    }

    /// Replace all parameters with those of `other`, which must have the
    /// same layout.
    pub fn load_params(&mut self, other: ParamStore<T>) -> Result<()> {
        if other.names() != self.params.names() {
            return Err(Error::Structural("parameter layout does not match the network".into()));
        }
        for (a, b) in self.params.tensors().iter().zip(other.tensors()) {
            if a.shape() != b.shape() {
                return shape_err(format!("parameter shape {} vs {}", a.shape(), b.shape()));
            }
        }
        self.params = other;
        Ok(())
    }

    /// Record the forward pass in `g` with parameter handles `vars` (from
    /// [`ParamStore::bind`]).
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        image: Var,
        guide: Option<&GraphGuide<'_, T>>,
    ) -> Result<GraphOutput> {
        let spec = &self.spec;
        let s = g.shape(image);
        spec.check_image(s, 3)?;
        if vars.len() != self.params.len() {
            return Err(Error::Structural(format!(
                "{} parameter handles for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let v = self.variant();
        let levels = spec.levels;
        let masks: Vec<Arc<Mask<T>>> = if v.uses_mask() {
            let guide = guide.ok_or_else(|| Error::Structural(format!("{v} needs a mask and localization features")))?;
            guide.mask.check_matches(s)?;
            if guide.features.len() != levels {
                return Err(Error::Structural(format!(
                    "{} localization features for {levels} fusion points",
                    guide.features.len()
                )));
            }
            (0..levels)
                .map(|l| downsample_mask(guide.mask, 1 << l).map(Arc::new))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };

        let mut f = Fwd {
            g,
            vars,
            store: &self.params,
        };
        let mut x = f.conv_act("head", image, 1)?;
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            x = f.dense(&format!("enc.l{l}"), x, spec.dense_depth)?;
            skips.push(x);
            if v.has_sfm() {
                let loc = guide.expect("checked above").features[l];
                let proj = f.conv(&format!("enc.l{l}.sfm.proj"), loc, 1)?;
                let fused = f.g.add(x, proj)?;
                x = f.g.sfm(fused, &masks[l])?;
            }
            x = f.conv_act(&format!("enc.l{l}.down"), x, 2)?;
        }
        x = f.dense("mid", x, spec.dense_depth)?;
        for l in (0..levels).rev() {
            let p = format!("dec.l{l}");
            x = f.g.upsample_nearest(x, 2);
            x = f.conv_act(&format!("{p}.up"), x, 1)?;
            x = f.g.concat(&[x, skips[l]])?;
            x = f.conv_act(&format!("{p}.merge"), x, 1)?;
            if v.has_sc() {
                let vars = ScBlockVars {
                    layers: (0..SC_LAYERS)
                        .map(|i| f.wb(&format!("{p}.sc.{i}.conv")))
                        .collect::<Result<_>>()?,
                    reduce: f.wb(&format!("{p}.sc.reduce"))?,
                };
                x = sc_block(f.g, x, &masks[l], &vars)?;
            } else {
                x = f.dense(&p, x, spec.dense_depth)?;
            }
            if v.has_nl() && l + 1 == levels {
                let q = f.conv(&format!("{p}.nl.query"), x, 1)?;
                let k = f.conv(&format!("{p}.nl.key"), x, 1)?;
                let val = f.conv(&format!("{p}.nl.value"), x, 1)?;
                let a = f.g.attention(q, k, val)?;
                let o = f.conv(&format!("{p}.nl.out"), a, 1)?;
                x = f.g.add(x, o)?;
            }
            if v.has_snl() {
                let vars = SnlModuleVars {
                    fusion1: f.wb(&format!("{p}.snl.fusion1"))?,
                    connector: f.wb(&format!("{p}.snl.connector"))?,
                    fusion2: f.wb(&format!("{p}.snl.fusion2"))?,
                    policy: spec.snl_policy,
                };
                x = snl_module(f.g, x, &masks[l], &vars)?;
            }
        }
        let y = f.conv("tail", x, 1)?;
        let output = match self.role {
            Role::Localize => f.g.sigmoid(y),
            Role::Restore => f.g.add(image, y)?,
        };
        Ok(GraphOutput { output, features: skips })
    }
}

/// Localization network for `spec` (its lighter derived spec is used).
pub fn build_net_l<T: Scalar>(spec: &NetSpec, seed: u64) -> Result<Net<T>> {
    Net::build(&spec.localizer(), Role::Localize, seed)
}

/// Restoration network of `spec.variant`.
pub fn build_net_r<T: Scalar>(spec: &NetSpec, seed: u64) -> Result<Net<T>> {
    Net::build(spec, Role::Restore, seed)
}

/// Mask probabilities `(n, 1, h, w)` and encoder features per level.
pub fn forward_localize<T: Scalar>(net_l: &Net<T>, image: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    if net_l.role != Role::Localize {
        return Err(Error::Structural("forward_localize needs a localization network".into()));
    }
    let mut g = Graph::new();
    let vars = net_l.params.bind(&mut g, false);
    let x = g.constant(image.clone());
    let out = net_l.forward_graph(&mut g, &vars, x, None)?;
    let feats = out.features.iter().map(|&f| g.value(f).clone()).collect();
    Ok((g.value(out.output).clone(), feats))
}

/// Binary mask from localization probabilities.
pub fn mask_from_prob<T: Scalar>(prob: &Tensor<T>) -> Result<Mask<T>> {
    Mask::threshold(prob, T::lit(MASK_THRESHOLD))
}

/// Restored image. `mask` and `loc_features` are ignored by Net1.
pub fn forward_restore<T: Scalar>(
    net_r: &Net<T>,
    image: &Tensor<T>,
    mask: &Mask<T>,
    loc_features: &[Tensor<T>],
) -> Result<Tensor<T>> {
    if net_r.role != Role::Restore {
        return Err(Error::Structural("forward_restore needs a restoration network".into()));
    }
    let mut g = Graph::new();
    let vars = net_r.params.bind(&mut g, false);
    let x = g.constant(image.clone());
    let feats: Vec<Var> = loc_features.iter().map(|f| g.constant(f.clone())).collect();
    let guide = GraphGuide {
        mask,
        features: &feats,
    };
    let out = net_r.forward_graph(&mut g, &vars, x, Some(&guide))?;
    Ok(g.value(out.output).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetSpec {
        NetSpec {
            levels: 2,
            base_channels: 4,
            dense_depth: 2,
            growth: 2,
            sc_growth: 2,
            ..NetSpec::default()
        }
    }

    #[test]
    fn variant_names() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("net3".parse::<Variant>().unwrap(), Variant::Net3);
        assert!("Net6".parse::<Variant>().is_err());
    }

    #[test]
    fn shapes_and_ranges() {
        let spec = small();
        let img = Tensor::from_fn(Shape::new(1, 3, 16, 16), |_, c, y, x| ((c + y * x) % 7) as f32 / 7.0);
        let nl = build_net_l::<f32>(&spec, 1).unwrap();
        let (prob, feats) = forward_localize(&nl, &img).unwrap();
        assert_eq!(prob.shape(), Shape::new(1, 1, 16, 16));
        assert!(prob.data().iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(feats.len(), 2);
        let mask = mask_from_prob(&prob).unwrap();
        for v in Variant::ALL {
            let net = build_net_r::<f32>(&NetSpec { variant: v, ..spec }, 2).unwrap();
            let out = forward_restore(&net, &img, &mask, &feats).unwrap();
            assert_eq!(out.shape(), img.shape());
            // zero tail: output is the input
            assert_eq!(out, img);
        }
    }

    #[test]
    fn indivisible_input_reports_padding() {
        let spec = small();
        let nl = build_net_l::<f32>(&spec, 1).unwrap();
        let err = forward_localize(&nl, &Tensor::zeros(Shape::new(1, 3, 18, 16))).unwrap_err();
        assert!(err.to_string().contains("pad by 2 rows"), "{err}");
    }

    #[test]
    fn module_inventory() {
        let spec = small();
        let n5 = build_net_r::<f32>(&NetSpec { variant: Variant::Net5, ..spec }, 0).unwrap();
        assert_eq!(n5.count_modules(ModuleKind::ScBlock), 2);
        assert_eq!(n5.count_modules(ModuleKind::SnlModule), 2);
        let n1 = build_net_r::<f32>(&NetSpec { variant: Variant::Net1, ..spec }, 0).unwrap();
        assert_eq!(n1.count_modules(ModuleKind::ScBlock), 0);
        assert_eq!(n1.count_modules(ModuleKind::Sfm), 0);
    }
}
