use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod runconfig;

/// Multi-label defect detection experiments: dataset generation, training,
/// evaluation, single-image detection and the attention beta sweep.
///
/// Configuration is layered: built-in defaults, then `--config` (a
/// `key = value` file with `#` comments), then environment variables named
/// `DEFECTNET_<KEY>` (the key upper-cased with every non-alphanumeric
/// character turned into `_`, e.g. `DEFECTNET_TRAIN_LR`), then flags.
#[derive(Parser, Debug)]
#[command(name = "defectnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate, augment, split and save a synthetic dataset.
    Gen {
        /// Preset name (standard, tiny, harness) or a spec file of `data.*` keys.
        #[arg(long, default_value = "standard")]
        spec: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Write into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model on the train split and score the val split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// full, no_multilevel or no_attention.
        #[arg(long)]
        variant: Option<String>,
        /// Attention information factor.
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint (or a predictions file) on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "predictions")]
        ckpt: Option<PathBuf>,
        /// JSON-lines detections to score instead of running a model.
        #[arg(long, conflicts_with = "ckpt")]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value_t = 0.5)]
        conf: f64,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect defects in one PGM image; JSON lines on stdout.
    Detect {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        conf: f64,
        /// Also write an SVG overlay of the detections.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Train one model per beta value with the same seed.
    SweepBeta {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated beta values.
        #[arg(long)]
        betas: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let env = std::env::vars();
    match cli.command {
        Command::Gen { spec, out, seed, force } => commands::gen(&spec, &out, seed, force, env),
        Command::Train {
            data,
            cfg,
            variant,
            beta,
            out,
        } => {
            let mut set = cfg.set.clone();
            if let Some(v) = variant {
                set.push(format!("model.variant={v}"));
            }
            if let Some(b) = beta {
                set.push(format!("attention.beta={b}"));
            }
            commands::train(&data, &ConfigArgs { set, ..cfg }, &out, env)
        }
        Command::Eval {
            data,
            ckpt,
            predictions,
            split,
            iou,
            conf,
            cfg,
            out,
        } => commands::eval(
            &commands::EvalArgs {
                data,
                ckpt,
                predictions,
                split,
                iou,
                conf,
                out,
            },
            &cfg,
            env,
        ),
        Command::Detect { image, ckpt, conf, svg } => commands::detect(&image, &ckpt, conf, svg.as_deref()),
        Command::SweepBeta { data, cfg, betas, out } => commands::sweep_beta(&data, &cfg, &betas, &out, env),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
