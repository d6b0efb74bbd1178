//! Deterministic procedural clean images and spatially sparse degradations
//! with exact ground-truth masks.

mod clean;
mod degrade;
pub mod rng;

use std::fmt;
use std::str::FromStr;

pub use clean::gen_clean;
pub use degrade::{
    apply_shadow_quad, degrade, gt_mask_from_pair, Kind, Sample, DEFAULT_TAU, MAX_DEGRADED_FRACTION,
};

use crate::error::{Error, Result};
pub use rng::Rng;

/// Everything needed to regenerate one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ManifestEntry {
    pub idx: usize,
    pub kind: Kind,
    pub seed: u64,
    pub severity: f64,
    pub h: usize,
    pub w: usize,
}

impl ManifestEntry {
    /// Builds the sample this entry describes. The clean image uses `seed`,
    /// the degradation uses the first draw of a generator seeded with it.
    pub fn generate(&self) -> Result<Sample> {
        let clean = gen_clean(self.h, self.w, self.seed)?;
        let degrade_seed = Rng::new(self.seed).next_u64();
        let mut s = degrade(&clean, self.kind, degrade_seed, self.severity)?;
        s.seed = self.seed;
        Ok(s)
    }
}

impl fmt::Display for ManifestEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // `{:?}` on f64 prints the shortest string that parses back exactly
        write!(
            f,
            "idx={} kind={} seed={} severity={:?} h={} w={}",
            self.idx, self.kind, self.seed, self.severity, self.h, self.w
        )
    }
}

impl FromStr for ManifestEntry {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = |m: String| Error::Parse { offset: 0, msg: m };
        let mut fields = std::collections::HashMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| bad(format!("malformed field '{tok}'")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("missing '{k}' in '{line}'")));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("bad '{k}' in '{line}'"))) };
        Ok(Self {
            idx: num("idx")?,
            kind: get("kind")?.parse()?,
            seed: get("seed")?.parse().map_err(|_| bad(format!("bad seed in '{line}'")))?,
            severity: get("severity")?
                .parse()
                .map_err(|_| bad(format!("bad severity in '{line}'")))?,
            h: num("h")?,
            w: num("w")?,
        })
    }
}

/// Samples plus the manifest that regenerates them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub manifest: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn manifest_text(&self) -> String {
        manifest_text(&self.manifest)
    }
}

pub fn manifest_text(entries: &[ManifestEntry]) -> String {
    entries.iter().map(|e| format!("{e}\n")).collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.parse().map_err(|e| match e {
                Error::Parse { msg, .. } => Error::Parse {
                    offset: text.lines().take(i).map(|x| x.len() + 1).sum(),
                    msg,
                },
                other => other,
            })
        })
        .collect()
}

/// Manifest for `n` samples: per-sample seed, kind (uniform over `kinds`)
/// and severity (uniform in `[0.5, 1]`) drawn in order from the master seed.
pub fn plan_dataset(n: usize, kinds: &[Kind], seed: u64, h: usize, w: usize) -> Result<Vec<ManifestEntry>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one sample".into()));
    }
    if kinds.is_empty() {
        return Err(Error::InvalidArgument("dataset needs at least one kind".into()));
    }
    let mut rng = Rng::new(seed);
    Ok((0..n)
        .map(|idx| {
            let seed = rng.next_u64();
            let kind = kinds[rng.below(kinds.len() as u64) as usize];
            let severity = rng.uniform_in(0.5, 1.0);
            ManifestEntry {
                idx,
                kind,
                seed,
                severity,
                h,
                w,
            }
        })
        .collect())
}

pub fn regenerate(manifest: &[ManifestEntry]) -> Result<Vec<Sample>> {
    manifest.iter().map(ManifestEntry::generate).collect()
}

pub fn make_dataset(n: usize, kinds: &[Kind], seed: u64, h: usize, w: usize) -> Result<Dataset> {
    let manifest = plan_dataset(n, kinds, seed, h, w)?;
    let samples = regenerate(&manifest)?;
    Ok(Dataset { samples, manifest })
}
