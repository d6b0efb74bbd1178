//! Losses, optimizer, schedule, batching and the two training phases:
//! first the localization network on ground-truth masks, then a restoration
//! network guided by the frozen localization network.

mod adam;

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

pub use adam::{AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use crate::autodiff::{Graph, BCE_CLAMP};
use crate::error::{Error, Result};
use crate::guided::SourcePolicy;
use crate::metrics::{mask_prf, mse, psnr, MaskScores, QualityReport};
use crate::nets::{
    ablation_variant, build_net_l, build_net_r, forward_localize, forward_restore, mask_from_prob, GraphGuide, Net,
    NetSpec, Variant,
};
use crate::scalar::Scalar;
use crate::synth::rng::Rng;
use crate::synth::{gt_mask_from_pair, make_dataset, Kind, Sample};
use crate::tensor::{Mask, Tensor};

pub use crate::synth::gt_mask_from_pair as gt_mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Localize,
    Restore,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Localize => "localize",
            Phase::Restore => "restore",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "localize" => Ok(Phase::Localize),
            "restore" => Ok(Phase::Restore),
            _ => Err(Error::InvalidArgument(format!("unknown phase '{s}'"))),
        }
    }
}

/// Synthetic training and validation data.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kinds: Vec<Kind>,
    pub train_samples: usize,
    pub val_samples: usize,
    /// Side of the generated square images; patches are cropped from them.
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kinds: vec![Kind::Blob],
            train_samples: 256,
            val_samples: 16,
            image_size: 80,
            seed: 1,
        }
    }
}

/// Every training hyperparameter.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub learning_rate: f64,
    /// Epochs between learning-rate halvings.
    pub lr_halving_period_epochs: u64,
    /// Iterations that make up one epoch.
    pub iters_per_epoch: u64,
    pub epochs: u64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub seed: u64,
    /// Threshold on `max_c |degraded - clean|` for ground-truth masks.
    pub mask_threshold: f64,
    pub hflip: bool,
    pub vflip: bool,
    pub log_every: u64,
    pub val_every: u64,
    /// Train the restoration network on ground-truth instead of predicted masks.
    pub oracle_mask: bool,
    pub net: NetSpec,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Restore,
            learning_rate: 2e-4,
            lr_halving_period_epochs: 50,
            iters_per_epoch: 20,
            epochs: 100,
            batch_size: 8,
            patch_size: 64,
            seed: 0,
            mask_threshold: 0.1,
            hflip: true,
            vflip: true,
            log_every: 10,
            val_every: 100,
            oracle_mask: false,
            net: NetSpec::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn iterations(&self) -> u64 {
        self.epochs * self.iters_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.iters_per_epoch == 0 || self.lr_halving_period_epochs == 0 {
            return bad("iters_per_epoch and lr_halving_period_epochs must be positive".into());
        }
        if self.batch_size == 0 || self.log_every == 0 || self.val_every == 0 {
            return bad("batch_size, log_every and val_every must be positive".into());
        }
        let m = self.net.size_multiple();
        if self.patch_size == 0 || self.patch_size % m != 0 {
            return bad(format!("patch_size {} must be a positive multiple of {m}", self.patch_size));
        }
        if self.data.image_size < self.patch_size || self.data.image_size % m != 0 {
            return bad(format!(
                "image_size {} must be at least patch_size and a multiple of {m}",
                self.data.image_size
            ));
        }
        if self.data.kinds.is_empty() || self.data.train_samples == 0 {
            return bad("data needs at least one kind and one training sample".into());
        }
        self.net.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Learning rate at `iteration`: `lr0 * 2^-floor(epoch / period)`.
pub fn lr_at(iteration: u64, cfg: &TrainConfig) -> f64 {
    let epoch = iteration / cfg.iters_per_epoch;
    let halvings = (epoch / cfg.lr_halving_period_epochs).min(1023) as i32;
    cfg.learning_rate * 0.5f64.powi(halvings)
}

/// Mean absolute error.
pub fn loss_l1<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let l = g.l1_loss(p, Arc::new(target.clone()))?;
    Ok(g.value(l).data()[0].as_f64())
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn loss_bce<T: Scalar>(prob: &Tensor<T>, target: &Mask<T>) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(prob.clone());
    let l = g.bce_loss(p, Arc::new(target.clone()))?;
    Ok(g.value(l).data()[0].as_f64())
}

/// Clamp bound used by [`loss_bce`].
pub const BCE_EPS: f64 = BCE_CLAMP;

/// Training and validation samples generated from a [`DataConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl TrainData {
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        let s = cfg.image_size;
        let train = make_dataset(cfg.train_samples, &cfg.kinds, cfg.seed, s, s)?.samples;
        let val = if cfg.val_samples == 0 {
            Vec::new()
        } else {
            make_dataset(cfg.val_samples, &cfg.kinds, held_out_seed(cfg.seed, 1), s, s)?.samples
        };
        Ok(Self { train, val })
    }
}

/// Seed of the `k`-th held-out set derived from a data seed.
pub fn held_out_seed(seed: u64, k: u64) -> u64 {
    let mut r = Rng::new(seed ^ 0x6a09_e667_f3bc_c908);
    let mut out = 0;
    for _ in 0..k {
        out = r.next_u64();
    }
    out
}

/// One training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub clean: Tensor<f32>,
    pub degraded: Tensor<f32>,
    pub mask: Mask<f32>,
}

/// Random crops and flips drawn from a seeded generator.
pub struct Sampler<'a> {
    samples: &'a [Sample],
    rng: Rng,
    batch: usize,
    patch: usize,
    hflip: bool,
    vflip: bool,
    tau: f64,
}

impl<'a> Sampler<'a> {
    pub fn new(samples: &'a [Sample], cfg: &TrainConfig) -> Self {
        Self {
            samples,
            rng: Rng::new(cfg.seed),
            batch: cfg.batch_size,
            patch: cfg.patch_size,
            hflip: cfg.hflip,
            vflip: cfg.vflip,
            tau: cfg.mask_threshold,
        }
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let mut clean = Vec::with_capacity(self.batch);
        let mut degraded = Vec::with_capacity(self.batch);
        for _ in 0..self.batch {
            let s = &self.samples[self.rng.below(self.samples.len() as u64) as usize];
            let sh = s.clean.shape();
            let y0 = self.rng.below((sh.h - self.patch + 1) as u64) as usize;
            let x0 = self.rng.below((sh.w - self.patch + 1) as u64) as usize;
            let mut c = s.clean.crop(y0, x0, self.patch, self.patch)?;
            let mut d = s.degraded.crop(y0, x0, self.patch, self.patch)?;
            if self.hflip && self.rng.coin() {
                c = c.flip_horizontal();
                d = d.flip_horizontal();
            }
            if self.vflip && self.rng.coin() {
                c = c.flip_vertical();
                d = d.flip_vertical();
            }
            clean.push(c);
            degraded.push(d);
        }
        let clean = Tensor::gather_batch(&clean.iter().collect::<Vec<_>>())?;
        let degraded = Tensor::gather_batch(&degraded.iter().collect::<Vec<_>>())?;
        let mask = gt_mask_from_pair(&clean, &degraded, self.tau)?;
        Ok(Batch { clean, degraded, mask })
    }
}

/// One metric-log record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub iter: u64,
    /// Mean loss over the iterations since the previous record.
    pub loss: f64,
    pub lr: f64,
    pub val_psnr: Option<f64>,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "iter={} loss={} lr={}", self.iter, self.loss, self.lr)?;
        if let Some(v) = self.val_psnr {
            write!(f, " val_psnr={v}")?;
        }
        Ok(())
    }
}

pub fn log_text(log: &[LogRecord]) -> String {
    log.iter().map(|r| format!("{r}\n")).collect()
}

/// A trained network with its metric log and per-iteration losses.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: Net<f32>,
    pub log: Vec<LogRecord>,
    pub losses: Vec<f64>,
}

fn take_grads(g: &crate::autodiff::Gradients<f32>, vars: &[crate::autodiff::Var], net: &Net<f32>) -> Vec<Tensor<f32>> {
    vars.iter()
        .zip(net.params().tensors())
        .map(|(&v, p)| g.get_or_zeros(v, p.shape()))
        .collect()
}

struct Logger {
    log: Vec<LogRecord>,
    losses: Vec<f64>,
    since: usize,
}

impl Logger {
    fn push(&mut self, cfg: &TrainConfig, it: u64, loss: f64, lr: f64, val: impl FnOnce() -> Result<Option<f64>>) -> Result<()> {
        self.losses.push(loss);
        let done = it + 1;
        let last = done == cfg.iterations();
        if done % cfg.log_every == 0 || last {
            let window = &self.losses[self.since..];
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            self.since = self.losses.len();
            let val_psnr = if done % cfg.val_every == 0 || last { val()? } else { None };
            self.log.push(LogRecord {
                iter: done,
                loss: mean,
                lr,
                val_psnr,
            });
        }
        Ok(())
    }
}

/// Optimizes BCE of the localization network against ground-truth masks.
pub fn train_localize(cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut net = build_net_l::<f32>(&cfg.net, cfg.seed)?;
    let mut adam = AdamState::new(net.params().tensors());
    let mut sampler = Sampler::new(&data.train, cfg);
    let mut logger = Logger {
        log: Vec::new(),
        losses: Vec::new(),
        since: 0,
    };
    for it in 0..cfg.iterations() {
        let batch = sampler.next_batch()?;
        let mut g = Graph::new();
        let vars = net.params().bind(&mut g, true);
        let x = g.constant(batch.degraded);
        let out = net.forward_graph(&mut g, &vars, x, None)?;
        let loss = g.bce_loss(out.output, Arc::new(batch.mask))?;
        let lv = g.value(loss).data()[0] as f64;
        let grads = g.backward(loss)?;
        let gs = take_grads(&grads, &vars, &net);
        let lr = lr_at(it, cfg);
        adam.update(net.params_mut().tensors_mut(), &gs, lr)?;
        logger.push(cfg, it, lv, lr, || Ok(None))?;
    }
    Ok(TrainOutcome {
        net,
        log: logger.log,
        losses: logger.losses,
    })
}

/// Mask and localization features used to guide restoration of `degraded`.
pub fn guidance(net_l: &Net<f32>, degraded: &Tensor<f32>) -> Result<(Mask<f32>, Vec<Tensor<f32>>)> {
    let (prob, feats) = forward_localize(net_l, degraded)?;
    Ok((mask_from_prob(&prob)?, feats))
}

/// Optimizes L1 of a restoration network guided by the frozen `net_l`.
pub fn train_restore(cfg: &TrainConfig, data: &TrainData, net_l: Option<&Net<f32>>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net_l = net_l.ok_or_else(|| {
        Error::Config("the restore phase needs a trained localization network checkpoint".into())
    })?;
    let mut net = build_net_r::<f32>(&cfg.net, cfg.seed)?;
    let guided = cfg.net.variant.uses_mask();
    let mut adam = AdamState::new(net.params().tensors());
    let mut sampler = Sampler::new(&data.train, cfg);
    let mut logger = Logger {
        log: Vec::new(),
        losses: Vec::new(),
        since: 0,
    };
    for it in 0..cfg.iterations() {
        let batch = sampler.next_batch()?;
        let (mask, feats) = if guided {
            let (m, f) = guidance(net_l, &batch.degraded)?;
            (if cfg.oracle_mask { batch.mask.clone() } else { m }, f)
        } else {
            (batch.mask.clone(), Vec::new())
        };
        let mut g = Graph::new();
        let vars = net.params().bind(&mut g, true);
        let x = g.constant(batch.degraded);
        let fv: Vec<_> = feats.into_iter().map(|f| g.constant(f)).collect();
        let guide = GraphGuide {
            mask: &mask,
            features: &fv,
        };
        let out = net.forward_graph(&mut g, &vars, x, Some(&guide))?;
        let loss = g.l1_loss(out.output, Arc::new(batch.clean))?;
        let lv = g.value(loss).data()[0] as f64;
        let grads = g.backward(loss)?;
        let gs = take_grads(&grads, &vars, &net);
        let lr = lr_at(it, cfg);
        adam.update(net.params_mut().tensors_mut(), &gs, lr)?;
        let net_ref = &net;
        logger.push(cfg, it, lv, lr, || {
            if data.val.is_empty() {
                return Ok(None);
            }
            let reports = evaluate_restore(net_l, net_ref, &data.val, cfg.oracle_mask, cfg.patch_size)?;
            Ok(Some(reports.iter().map(|r| r.psnr_db).sum::<f64>() / reports.len() as f64))
        })?;
    }
    Ok(TrainOutcome {
        net,
        log: logger.log,
        losses: logger.losses,
    })
}

/// Dispatch on `cfg.phase`.
pub fn train(cfg: &TrainConfig, data: &TrainData, net_l: Option<&Net<f32>>) -> Result<TrainOutcome> {
    match cfg.phase {
        Phase::Localize => train_localize(cfg, data),
        Phase::Restore => train_restore(cfg, data, net_l),
    }
}

/// Centre crop of a sample to `size x size`.
pub fn center_crop(s: &Sample, size: usize) -> Result<(Tensor<f32>, Tensor<f32>, Mask<f32>)> {
    let sh = s.clean.shape();
    if size > sh.h || size > sh.w {
        return Err(Error::InvalidArgument(format!("crop {size} larger than image {sh}")));
    }
    let (y0, x0) = ((sh.h - size) / 2, (sh.w - size) / 2);
    Ok((
        s.clean.crop(y0, x0, size, size)?,
        s.degraded.crop(y0, x0, size, size)?,
        s.gt_mask.crop(y0, x0, size, size)?,
    ))
}

/// Restored image, the mask that guided it, and the predicted mask.
pub fn restore_image(
    net_l: &Net<f32>,
    net_r: &Net<f32>,
    degraded: &Tensor<f32>,
    oracle: Option<&Mask<f32>>,
) -> Result<(Tensor<f32>, Mask<f32>)> {
    let (pred, feats) = guidance(net_l, degraded)?;
    let used = oracle.cloned().unwrap_or_else(|| pred.clone());
    let out = forward_restore(net_r, degraded, &used, &feats)?;
    Ok((out, pred))
}

/// Quality of restoring the centre `size` crop of every sample.
pub fn evaluate_restore(
    net_l: &Net<f32>,
    net_r: &Net<f32>,
    samples: &[Sample],
    oracle: bool,
    size: usize,
) -> Result<Vec<QualityReport>> {
    samples
        .iter()
        .map(|s| {
            let (clean, degraded, gt) = center_crop(s, size)?;
            let (out, pred) = restore_image(net_l, net_r, &degraded, oracle.then_some(&gt))?;
            QualityReport::evaluate(&out, &clean, &gt, Some(&pred))
        })
        .collect()
}

/// Mask scores of the localization network on the centre crops.
pub fn evaluate_localize(net_l: &Net<f32>, samples: &[Sample], size: usize) -> Result<Vec<MaskScores>> {
    samples
        .iter()
        .map(|s| {
            let (_, degraded, gt) = center_crop(s, size)?;
            let (pred, _) = guidance(net_l, &degraded)?;
            mask_prf(&pred, &gt)
        })
        .collect()
}

/// One row of an ablation run.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub policy: SourcePolicy,
    pub seed: u64,
    pub params: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    /// Mean MSE over pixels outside the ground-truth mask.
    pub clean_mse: f64,
    pub final_loss: f64,
    /// Mean mask F1 of this seed's localization network on the test set.
    pub localize_f1: f64,
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "variant={} policy={} seed={} params={} psnr={:.4} ssim={:.5} clean_mse={:.6e} final_loss={:.6} loc_f1={:.4}",
            self.variant,
            self.policy,
            self.seed,
            self.params,
            self.psnr_db,
            self.ssim,
            self.clean_mse,
            self.final_loss,
            self.localize_f1
        )
    }
}

/// Which rungs to train and how.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationPlan {
    pub variants: Vec<Variant>,
    /// Step-two policies tried for Net5.
    pub policies: Vec<SourcePolicy>,
    pub seeds: Vec<u64>,
    /// Localization training iterations per seed.
    pub localize_iterations: u64,
    pub test_samples: usize,
}

impl Default for AblationPlan {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            policies: vec![SourcePolicy::CleanOnly, SourcePolicy::AllPixels],
            seeds: vec![0, 1, 2],
            localize_iterations: 1000,
            test_samples: 64,
        }
    }
}

/// Trains the localization network once per seed, then every requested
/// variant under the same configuration, and scores each on a held-out set.
///
/// Independent runs execute on the rayon pool; each is seeded on its own, so
/// the rows do not depend on the thread count. `progress` sees every row as
/// it completes, in completion order; the returned rows are in plan order.
pub fn run_ablation(
    cfg: &TrainConfig,
    plan: &AblationPlan,
    progress: impl FnMut(&AblationRow) + Send,
) -> Result<Vec<AblationRow>> {
    let data = TrainData {
        val: Vec::new(),
        ..TrainData::generate(&cfg.data)?
    };
    let s = cfg.data.image_size;
    let test = make_dataset(plan.test_samples.max(1), &cfg.data.kinds, held_out_seed(cfg.data.seed, 2), s, s)?.samples;

    let localizers: Vec<(Net<f32>, f64)> = plan
        .seeds
        .par_iter()
        .map(|&seed| {
            let loc_cfg = TrainConfig {
                phase: Phase::Localize,
                seed,
                epochs: plan.localize_iterations.div_ceil(cfg.iters_per_epoch),
                ..cfg.clone()
            };
            let net = train_localize(&loc_cfg, &data)?.net;
            let scores = evaluate_localize(&net, &test, s)?;
            let f1 = scores.iter().map(|m| m.f1).sum::<f64>() / scores.len() as f64;
            Ok((net, f1))
        })
        .collect::<Result<_>>()?;

    let mut jobs = Vec::new();
    for (si, &seed) in plan.seeds.iter().enumerate() {
        for &v in &plan.variants {
            let policies = if v == Variant::Net5 { plan.policies.clone() } else { vec![cfg.net.snl_policy] };
            for policy in policies {
                jobs.push((si, seed, v, policy));
            }
        }
    }
    let progress = Mutex::new(progress);
    jobs.par_iter()
        .map(|&(si, seed, v, policy)| {
            let (net_l, localize_f1) = &localizers[si];
            let spec = ablation_variant(&NetSpec { snl_policy: policy, ..cfg.net }, v)?;
            let run_cfg = TrainConfig {
                phase: Phase::Restore,
                seed,
                net: spec,
                ..cfg.clone()
            };
            let out = train_restore(&run_cfg, &data, Some(net_l))?;
            let mut psnr_sum = 0.0;
            let mut ssim_sum = 0.0;
            let mut clean_sum = 0.0;
            for smp in &test {
                let (clean, degraded, gt) = center_crop(smp, s)?;
                let (restored, _) = restore_image(net_l, &out.net, &degraded, None)?;
                psnr_sum += psnr(&restored, &clean, 1.0, None)?;
                ssim_sum += crate::metrics::ssim(&restored, &clean)?;
                let comp = gt.complement();
                clean_sum += if comp.count() > 0 { mse(&restored, &clean, Some(&comp))? } else { 0.0 };
            }
            let n = test.len() as f64;
            let row = AblationRow {
                variant: v,
                policy,
                seed,
                params: out.net.param_count(),
                psnr_db: psnr_sum / n,
                ssim: ssim_sum / n,
                clean_mse: clean_sum / n,
                final_loss: out.losses.last().copied().unwrap_or(f64::NAN),
                localize_f1: *localize_f1,
            };
            (progress.lock().unwrap_or_else(|e| e.into_inner()))(&row);
            Ok(row)
        })
        .collect()
}
