use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dstnet::checkpoint::Checkpoint;
use dstnet::config::Settings;
use dstnet::harness;

#[derive(Parser)]
#[command(name = "dstnet", version, about = "Dual-stream prior-guided low-light image enhancement")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat dotted-key TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override (TOML literal), repeatable; wins over the file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (gets a resolved_config.toml snapshot).
    #[arg(long)]
    out: PathBuf,
    /// Sets train.seed and model.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on data.root (or $DSTNET_DATA_ROOT); --checkpoint resumes.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Enhance every PNG/JPEG in --input.
    Enhance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Ground-truth directory (same file names) for the grid strips.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Metrics on the test split: metrics.csv + metrics.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Prior / loss-term ablation table (rows from ablate.rows).
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn settings(c: &Common) -> Result<Settings> {
    let mut s = Settings::resolve(c.config.as_deref(), &c.overrides).context("resolving configuration")?;
    if let Some(seed) = c.seed {
        s.set_seed(seed);
    }
    s.write_snapshot(&c.out).with_context(|| format!("writing config snapshot to {}", c.out.display()))?;
    Ok(s)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { common, checkpoint } => {
            let s = settings(&common)?;
            let summary = harness::cmd_train(&s, &common.out, checkpoint.as_deref(), |row| {
                eprintln!("step {:>6}  epoch {:>4}  lr {:.6}  loss {:.6}", row.step, row.epoch, row.lr, row.total);
            })?;
            println!(
                "trained {} steps ({} epochs); best validation PSNR: {}",
                summary.steps,
                summary.epochs_completed,
                summary.best_psnr.map_or("n/a".to_string(), |p| format!("{p:.3} dB"))
            );
        }
        Cmd::Enhance { common, checkpoint, input, gt } => {
            let s = settings(&common)?;
            let net = load_checkpoint(&checkpoint)?.into_model()?;
            let summary = harness::cmd_enhance(&net, &input, &common.out, gt.as_deref(), s.enhance.grid)?;
            for (path, err) in &summary.failed {
                eprintln!("failed: {}: {err}", path.display());
            }
            println!("enhanced: {}  failed: {}", summary.written.len(), summary.failed.len());
        }
        Cmd::Eval { common, checkpoint } => {
            let s = settings(&common)?;
            let net = load_checkpoint(&checkpoint)?.into_model()?;
            let (_, test) = harness::load_splits(&s)?;
            let report = harness::cmd_eval(&net, &test, &common.out)?;
            let m = &report.mean;
            println!(
                "{} images  SSIM {:.4}  PSNR {:.3}  LOE {:.2}  DE {:.3}  EME {:.3}",
                report.per_image.len(),
                m.ssim,
                m.psnr,
                m.loe,
                m.de,
                m.eme
            );
        }
        Cmd::Ablate { common, checkpoint } => {
            let s = settings(&common)?;
            let ck = load_checkpoint(&checkpoint)?;
            let (train, test) = harness::load_splits(&s)?;
            let report = harness::cmd_ablate(&ck, &s, &train, &test, &common.out)?;
            print!("{}", report.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let missing = e.chain().any(|c| matches!(c.downcast_ref::<dstnet::Error>(), Some(dstnet::Error::MissingPath(_))));
            ExitCode::from(if missing { 2 } else { 1 })
        }
    }
}
