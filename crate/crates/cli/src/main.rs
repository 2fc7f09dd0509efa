//! `proxymim`: synthesize data, pre-train, probe and inspect attention.

mod commands;
mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::analyze::{self, ImageSource};
use commands::{default_out, open_dataset};
use proxymim::pretrain::{load_checkpoint, save_checkpoint};
use proxymim::{Error, Result};

#[derive(Parser)]
#[command(name = "proxymim", version, about = "Masked image modeling with a proxy-token bottleneck")]
struct Cli {
    /// JSON run configuration; defaults are used for anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration value, e.g. `--set recipe.peak_lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutArgs {
    /// Output directory (default: `$PROXYMIM_OUT/<kind>-<hash>` or `runs/...`).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes dataset.
    Synth {
        #[command(flatten)]
        out: OutArgs,
    },
    /// Pre-train an encoder, or run a sweep of pre-trainings.
    Pretrain {
        /// Dataset directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutArgs,
        /// Continue from a checkpoint written with the same configuration.
        #[arg(long, conflicts_with = "sweep")]
        resume: Option<PathBuf>,
        /// Sweep axis `key=a,b,c` or `key=lo..hi[:step]`; repeatable.
        #[arg(long)]
        sweep: Vec<String>,
        /// Run the cross-product of sweep axes instead of one axis at a time.
        #[arg(long, requires = "sweep")]
        cross: bool,
    },
    /// Linear probe on frozen features; appends one row to the report.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "probe_report.csv")]
        report: PathBuf,
        /// Permute training labels (control run).
        #[arg(long)]
        shuffle_labels: bool,
        /// Also write the frozen features and labels as raw tensors here.
        #[arg(long)]
        export_features: Option<PathBuf>,
    },
    /// Attention map of one query token over the image patches.
    Attmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A PGM/PPM image.
        #[arg(long, conflicts_with = "data")]
        image: Option<PathBuf>,
        /// Dataset directory; use with `--index`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// `patch:R,C` or `proxy:K`.
        #[arg(long)]
        query: String,
        /// `all` or `last`.
        #[arg(long, default_value = "last")]
        layers: String,
        /// Head index or `mean`.
        #[arg(long, default_value = "mean")]
        head: String,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Mean attention distance per layer and head.
    Attdist {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Dataset-averaged proxy attention heatmaps and their entropies.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "last")]
        layers: String,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Write a copy of a checkpoint without the reconstruction path.
    Strip {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved configuration and its hash.
    ShowConfig,
}

fn out_dir(args: &OutArgs, kind: &str, hash: &str) -> PathBuf {
    args.out.clone().unwrap_or_else(|| default_out(kind, hash))
}

fn checkpoint_hash(path: &Path) -> Result<String> {
    let ckpt = load_checkpoint(path)?;
    Ok(ckpt.config_hash.map(|h| h.chars().take(12).collect()).unwrap_or_else(|| "unknown".into()))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config::load(cli.config.as_deref(), &cli.overrides)?;
    let hash = cfg.short_hash();
    match cli.command {
        Command::Synth { out } => commands::synth::run(&cfg, &out_dir(&out, "synth", &hash), out.force),
        Command::Pretrain { data, out, resume, sweep, cross } => {
            let items = open_dataset(&data, None)?;
            commands::check_compatible(&cfg.model, &items)?;
            if sweep.is_empty() {
                let dir = out_dir(&out, "pretrain", &hash);
                commands::train::run(&cfg, &items, &dir, out.force, resume.as_deref()).map(|_| ())
            } else {
                let axes = sweep.iter().map(|s| config::parse_sweep(s)).collect::<Result<Vec<_>>>()?;
                let dir = out_dir(&out, "sweep", &hash);
                commands::train::sweep(&cfg, &items, &dir, out.force, &axes, cross)
            }
        }
        Command::Probe { checkpoint, data, report, shuffle_labels, export_features } => {
            let args = commands::probe::ProbeArgs {
                checkpoint: &checkpoint,
                dataset: &data,
                report: &report,
                shuffle_labels,
                export: export_features.as_deref(),
            };
            commands::probe::run(&cfg, &args).map(|_| ())
        }
        Command::Attmap { checkpoint, image, data, index, query, layers, head, out } => {
            let src = match (&image, &data) {
                (Some(p), _) => ImageSource::File(p),
                (None, Some(d)) => ImageSource::Dataset(d, index),
                (None, None) => return Err(Error::Input("attmap needs --image or --data".into())),
            };
            let dir = out_dir(&out, "attmap", &checkpoint_hash(&checkpoint)?);
            analyze::attmap(&checkpoint, src, &query, analyze::parse_layers(&layers)?, &head, &dir, out.force)
        }
        Command::Attdist { checkpoint, data, out } => {
            let dir = out_dir(&out, "attdist", &checkpoint_hash(&checkpoint)?);
            analyze::attdist(&checkpoint, &data, cfg.analysis.max_images, &dir, out.force).map(|_| ())
        }
        Command::Heatmap { checkpoint, data, layers, out } => {
            let dir = out_dir(&out, "heatmap", &checkpoint_hash(&checkpoint)?);
            let layers = analyze::parse_layers(&layers)?;
            analyze::heatmap(&checkpoint, &data, cfg.analysis.max_images, layers, &dir, out.force).map(|_| ())
        }
        Command::Strip { checkpoint, out } => {
            let mut ckpt = load_checkpoint(&checkpoint)?;
            ckpt.strip_reconstruction();
            save_checkpoint(&out, &ckpt)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::ShowConfig => {
            let v = serde_json::json!({ "config_hash": cfg.hash(), "config": cfg });
            let text = serde_json::to_string_pretty(&v).expect("json serializes");
            // a closed pipe (e.g. `| head`) is not an error
            let _ = writeln!(std::io::stdout(), "{text}");
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Shape(_) | Error::Io { .. } => 2,
        Error::Data(_) | Error::Format { .. } => 3,
        Error::Numeric(_) => 4,
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
