//! Line-oriented `key = value` configuration.
//!
//! Keys use dotted paths (`net.base_channels`), `#` starts a comment, and
//! lists are comma separated. Unknown keys and repeated keys are rejected.
//! Every key and its default is listed by [`Config::documented_keys`].

use std::collections::HashSet;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::train::{AblationPlan, TrainConfig};

/// Everything a CLI run can be configured with.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub train: TrainConfig,
    pub ablation: AblationPlan,
}

type Getter = fn(&Config) -> String;
type Setter = fn(&mut Config, &str) -> Result<()>;

struct Key {
    name: &'static str,
    doc: &'static str,
    get: Getter,
    set: Setter,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{v}`: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{v}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

macro_rules! key {
    ($name:literal, $doc:literal, $($field:ident).+) => {
        Key {
            name: $name,
            doc: $doc,
            get: |c| c.$($field).+.to_string(),
            set: |c, v| {
                c.$($field).+ = parse($name, v)?;
                Ok(())
            },
        }
    };
    ($name:literal, $doc:literal, bool $($field:ident).+) => {
        Key {
            name: $name,
            doc: $doc,
            get: |c| c.$($field).+.to_string(),
            set: |c, v| {
                c.$($field).+ = parse_bool($name, v)?;
                Ok(())
            },
        }
    };
    ($name:literal, $doc:literal, list $($field:ident).+) => {
        Key {
            name: $name,
            doc: $doc,
            get: |c| join(&c.$($field).+),
            set: |c, v| {
                c.$($field).+ = parse_list($name, v)?;
                Ok(())
            },
        }
    };
}

const KEYS: &[Key] = &[
    key!("phase", "localize or restore", train.phase),
    key!("learning_rate", "initial Adam step size", train.learning_rate),
    key!("lr_halving_period_epochs", "epochs between learning-rate halvings", train.lr_halving_period_epochs),
    key!("iters_per_epoch", "iterations per epoch", train.iters_per_epoch),
    key!("epochs", "training epochs", train.epochs),
    key!("batch_size", "patches per iteration", train.batch_size),
    key!("patch_size", "training patch side", train.patch_size),
    key!("seed", "seed for weights and batch sampling", train.seed),
    key!("mask_threshold", "tau for ground-truth masks", train.mask_threshold),
    key!("hflip", "random horizontal flips", bool train.hflip),
    key!("vflip", "random vertical flips", bool train.vflip),
    key!("log_every", "iterations per log line", train.log_every),
    key!("val_every", "iterations between validation passes", train.val_every),
    key!("oracle_mask", "guide restoration with ground-truth masks", bool train.oracle_mask),
    key!("net.levels", "encoder levels", train.net.levels),
    key!("net.base_channels", "channels at full resolution", train.net.base_channels),
    key!("net.dense_depth", "layers per dense block", train.net.dense_depth),
    key!("net.growth", "dense block growth", train.net.growth),
    key!("net.sc_growth", "sparse block growth", train.net.sc_growth),
    key!("net.variant", "Net1 .. Net5", train.net.variant),
    key!("net.snl_policy", "clean_only or all_pixels", train.net.snl_policy),
    key!("data.kinds", "degradations: streak, blob, shadow, region_blur", list train.data.kinds),
    key!("data.train_samples", "training images", train.data.train_samples),
    key!("data.val_samples", "validation images", train.data.val_samples),
    key!("data.image_size", "generated image side", train.data.image_size),
    key!("data.seed", "dataset seed", train.data.seed),
    key!("ablate.variants", "ablation rungs", list ablation.variants),
    key!("ablate.policies", "step-two policies tried for Net5", list ablation.policies),
    key!("ablate.seeds", "training seeds", list ablation.seeds),
    key!("ablate.localize_iterations", "localization iterations per seed", ablation.localize_iterations),
    key!("ablate.test_samples", "held-out test images", ablation.test_samples),
];

impl Config {
    /// Defaults overridden by the assignments in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Apply the assignments in `text` on top of `self`.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |m: String| Error::Config(format!("line {}: {m}", i + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let key = KEYS
                .iter()
                .find(|e| e.name == k)
                .ok_or_else(|| at(format!("unknown key `{k}`")))?;
            if !seen.insert(k) {
                return Err(at(format!("key `{k}` given twice")));
            }
            (key.set)(self, v).map_err(|e| at(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Every key with its current value, in documentation order.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{} = {}\n", k.name, (k.get)(self))).collect()
    }

    /// `key = default  # description` for every key.
    pub fn documented_keys() -> String {
        let d = Config::default();
        KEYS.iter()
            .map(|k| format!("  {} = {}  # {}\n", k.name, (k.get)(&d), k.doc))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Variant;

    #[test]
    fn dotted_keys_and_comments() {
        let c = Config::parse("# run\nnet.variant = net3 # rung\n\nbatch_size=4\nhflip = false\ndata.kinds = blob, streak\n")
            .unwrap();
        assert_eq!(c.train.net.variant, Variant::Net3);
        assert_eq!(c.train.batch_size, 4);
        assert!(!c.train.hflip);
        assert_eq!(c.train.data.kinds.len(), 2);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(Config::parse("net.width = 3").is_err());
        assert!(Config::parse("seed = 1\nseed = 2").is_err());
        assert!(Config::parse("seed 1").is_err());
        assert!(Config::parse("seed = -1").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = Config::default();
        c.train.learning_rate = 3.5e-4;
        c.ablation.seeds = vec![4, 9];
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    }
}
