//! The `spair` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::autodiff::op_suite;
use crate::bench::{bench_sparse, to_csv, BenchConfig};
use crate::error::{Error, Result};
use crate::io::{checkpoint, pnm, Config};
use crate::metrics::{QualityReport, QualitySummary};
use crate::nets::{build_net_l, build_net_r, Net};
use crate::synth::{gt_mask_from_pair, make_dataset};
use crate::train::{
    evaluate_restore, held_out_seed, log_text, restore_image, run_ablation, train_localize, train_restore, Phase,
    TrainData,
};

const GRADCHECK_TOL: f64 = 1e-4;

fn after_help() -> String {
    format!("Config keys (`key = value`, `#` comments) and defaults:\n{}", Config::documented_keys())
}

#[derive(Debug, Parser)]
#[command(name = "spair", version, about = "Distortion-guided image restoration on synthetic data")]
#[command(after_long_help = after_help())]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both `seed` and `data.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with its manifest.
    Synth {
        /// Number of samples (default `data.train_samples`).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the localization network.
    TrainLoc,
    /// Train a restoration network guided by a trained localizer.
    TrainRestore {
        /// Localization checkpoint (default `<out>/net_l.sptn`).
        #[arg(long)]
        net_l: Option<PathBuf>,
    },
    /// Restore one PPM image.
    Infer {
        #[command(flatten)]
        nets: NetPaths,
        /// Degraded input image (P6).
        #[arg(long)]
        input: PathBuf,
        /// Clean reference; adds a quality report.
        #[arg(long)]
        clean: Option<PathBuf>,
    },
    /// Score a restoration network on held-out synthetic images.
    Eval {
        #[command(flatten)]
        nets: NetPaths,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Guide with ground-truth masks instead of predicted ones.
        #[arg(long)]
        oracle_mask: bool,
    },
    /// Train and compare Net1 .. Net5 under one budget.
    Ablate,
    /// Check reverse-mode gradients of every op against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        instances: usize,
    },
    /// Time sparse ops against dense convolution and write CSV.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [64usize, 128])]
        resolutions: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [16usize, 32])]
        channels: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.25, 0.5, 1.0])]
        densities: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Skip the attention step.
        #[arg(long)]
        no_snl: bool,
    },
}

#[derive(Debug, Args)]
struct NetPaths {
    /// Localization checkpoint (default `<out>/net_l.sptn`).
    #[arg(long)]
    net_l: Option<PathBuf>,
    /// Restoration checkpoint (default `<out>/net_r.sptn`).
    #[arg(long)]
    net_r: Option<PathBuf>,
}

/// Parse `args` (program name first), run, and return the exit code:
/// 0 on success, 1 on a runtime failure, 2 on a usage error.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.train.data.seed = s;
    }
    Ok(cfg)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_net(path: &Path, mut net: Net<f32>) -> Result<Net<f32>> {
    let params = checkpoint::load(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    net.load_params(params)
        .map_err(|e| Error::Config(format!("{}: {e}; was it trained with the same config?", path.display())))?;
    Ok(net)
}

fn nets(cfg: &Config, out: &Path, paths: &NetPaths) -> Result<(Net<f32>, Net<f32>)> {
    let spec = cfg.train.net;
    let lp = paths.net_l.clone().unwrap_or_else(|| out.join("net_l.sptn"));
    let rp = paths.net_r.clone().unwrap_or_else(|| out.join("net_r.sptn"));
    Ok((
        load_net(&lp, build_net_l(&spec, 0)?)?,
        load_net(&rp, build_net_r(&spec, 0)?)?,
    ))
}

fn execute(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    let out = &cli.out;
    fs::create_dir_all(out)?;
    match &cli.command {
        Command::Synth { count } => {
            let d = &cfg.train.data;
            let n = count.unwrap_or(d.train_samples);
            let ds = make_dataset(n, &d.kinds, d.seed, d.image_size, d.image_size)?;
            for (s, e) in ds.samples.iter().zip(&ds.manifest) {
                write(&out.join(format!("{:04}_clean.ppm", e.idx)), pnm::encode_ppm(&s.clean, 0)?)?;
                write(&out.join(format!("{:04}_degraded.ppm", e.idx)), pnm::encode_ppm(&s.degraded, 0)?)?;
                write(&out.join(format!("{:04}_mask.pgm", e.idx)), pnm::encode_mask(&s.gt_mask, 0)?)?;
            }
            write(&out.join("manifest.txt"), ds.manifest_text())?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::TrainLoc => {
            let mut tc = cfg.train.clone();
            tc.phase = Phase::Localize;
            let data = TrainData::generate(&tc.data)?;
            let outcome = train_localize(&tc, &data)?;
            checkpoint::save(&out.join("net_l.sptn"), outcome.net.params())?;
            write(&out.join("train_loc.log"), log_text(&outcome.log))?;
            write(&out.join("config.txt"), cfg.to_text())?;
            print!("{}", log_text(&outcome.log));
        }
        Command::TrainRestore { net_l } => {
            let mut tc = cfg.train.clone();
            tc.phase = Phase::Restore;
            let lp = net_l.clone().unwrap_or_else(|| out.join("net_l.sptn"));
            let loc = load_net(&lp, build_net_l(&tc.net, 0)?)?;
            let data = TrainData::generate(&tc.data)?;
            let outcome = train_restore(&tc, &data, Some(&loc))?;
            checkpoint::save(&out.join("net_r.sptn"), outcome.net.params())?;
            write(&out.join("train_restore.log"), log_text(&outcome.log))?;
            write(&out.join("config.txt"), cfg.to_text())?;
            print!("{}", log_text(&outcome.log));
        }
        Command::Infer { nets: paths, input, clean } => {
            let (loc, res) = nets(&cfg, out, paths)?;
            let img = pnm::read_image(input)?;
            if img.shape().c != 3 {
                return Err(Error::InvalidArgument(format!("{} is not an RGB (P6) image", input.display())));
            }
            let (restored, pred) = restore_image(&loc, &res, &img, None)?;
            write(&out.join("restored.ppm"), pnm::encode_ppm(&restored, 0)?)?;
            write(&out.join("mask.pgm"), pnm::encode_mask(&pred, 0)?)?;
            if let Some(cp) = clean {
                let reference = pnm::read_image(cp)?;
                reference.check_same_shape(&img, "clean reference")?;
                let gt = gt_mask_from_pair(&reference, &img, cfg.train.mask_threshold)?;
                let report = QualityReport::evaluate(&restored, &reference, &gt, Some(&pred))?;
                let line = report.line(0);
                write(&out.join("report.txt"), format!("{line}\n"))?;
                println!("{line}");
            }
        }
        Command::Eval {
            nets: paths,
            count,
            oracle_mask,
        } => {
            let (loc, res) = nets(&cfg, out, paths)?;
            let d = &cfg.train.data;
            let test = make_dataset(*count, &d.kinds, held_out_seed(d.seed, 2), d.image_size, d.image_size)?;
            let reports = evaluate_restore(&loc, &res, &test.samples, *oracle_mask, d.image_size)?;
            let mut text: String = reports.iter().enumerate().map(|(i, r)| r.line(i) + "\n").collect();
            text.push_str(&format!("{}\n", QualitySummary::of(&reports)));
            write(&out.join("report.txt"), &text)?;
            print!("{text}");
        }
        Command::Ablate => {
            let mut text = String::new();
            let rows = run_ablation(&cfg.train, &cfg.ablation, |r| println!("{r}"))?;
            for r in &rows {
                text.push_str(&format!("{r}\n"));
            }
            write(&out.join("ablation.txt"), &text)?;
            write(&out.join("config.txt"), cfg.to_text())?;
        }
        Command::Gradcheck { instances } => {
            let reports = op_suite(*instances, cfg.train.seed)?;
            let mut ok = true;
            let mut text = String::new();
            for r in &reports {
                let pass = r.passes(GRADCHECK_TOL);
                ok &= pass;
                text.push_str(&format!("{r} {}\n", if pass { "ok" } else { "FAIL" }));
            }
            write(&out.join("gradcheck.txt"), &text)?;
            print!("{text}");
            return Ok(ok);
        }
        Command::Bench {
            resolutions,
            channels,
            densities,
            repeats,
            no_snl,
        } => {
            let bc = BenchConfig {
                resolutions: resolutions.clone(),
                channels: channels.clone(),
                densities: densities.clone(),
                repeats: *repeats,
                seed: cfg.train.seed,
                include_snl: !no_snl,
            };
            let csv = to_csv(&bench_sparse(&bc)?);
            write(&out.join("bench.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(true)
}
