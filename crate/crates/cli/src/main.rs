use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use posegraft_cli::commands;
use posegraft_cli::config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

/// Frequency-guided diffusion lab: render a sprite benchmark, train the
/// base denoiser, transfer a driving action onto a source subject, and
/// evaluate against the oracle renders.
#[derive(Parser)]
#[command(name = "posegraft", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command. Precedence: defaults, then the config
/// file, then POSEGRAFT_* environment variables, then these flags.
#[derive(Args, Clone)]
struct CommonArgs {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; all randomness derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Amplitude-guidance scale.
    #[arg(long = "s-a")]
    s_a: Option<f64>,
    /// Phase-guidance scale.
    #[arg(long = "s-p")]
    s_p: Option<f64>,
    /// Driving-conditioned steps at the start of sampling.
    #[arg(long)]
    k: Option<usize>,
    /// Total inference steps.
    #[arg(long = "t-steps")]
    t_steps: Option<usize>,
    /// Finetuning iterations per pair.
    #[arg(long = "n-tr")]
    n_tr: Option<usize>,
    /// Classifier-free guidance weight.
    #[arg(long = "cfg-scale")]
    cfg_scale: Option<f64>,
    /// Sampler: ddim (deterministic) or ddpm.
    #[arg(long)]
    sampler: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the benchmark triples and base-training split.
    GenDataset {
        #[command(flatten)]
        common: CommonArgs,
        /// Output directory.
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
        #[arg(long = "n-subjects")]
        n_subjects: Option<usize>,
        #[arg(long = "n-actions")]
        n_actions: Option<usize>,
    },
    /// Train the base denoiser on the dataset's training split.
    TrainBase {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "dataset")]
        dataset: PathBuf,
        /// Checkpoint path to write.
        #[arg(long, default_value = "base.ckpt")]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from an existing checkpoint and optimizer state.
        #[arg(long)]
        resume: bool,
    },
    /// Finetune on one pair and generate the target image.
    Transfer {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "base.ckpt")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "dataset")]
        dataset: PathBuf,
        /// Which benchmark pair to transfer.
        #[arg(long = "pair-id")]
        pair_id: usize,
        /// Output PNG path.
        #[arg(long, default_value = "out.png")]
        out: PathBuf,
    },
    /// Run the ablation grid and write the evaluation report.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "base.ckpt")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "dataset")]
        dataset: PathBuf,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        /// Number of pairs to evaluate (0 = all).
        #[arg(long = "pairs")]
        pairs: Option<usize>,
        /// Seeds per (pair, config) cell.
        #[arg(long = "seeds")]
        seeds: Option<usize>,
    },
}

fn build_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_env()?;
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = common.s_a {
        cfg.s_a = v;
    }
    if let Some(v) = common.s_p {
        cfg.s_p = v;
    }
    if let Some(v) = common.k {
        cfg.k = v;
    }
    if let Some(v) = common.t_steps {
        cfg.t_steps = v;
    }
    if let Some(v) = common.n_tr {
        cfg.n_tr = v;
    }
    if let Some(v) = common.cfg_scale {
        cfg.cfg_scale = v;
    }
    if let Some(v) = &common.sampler {
        cfg.sampler = v.clone();
    }
    Ok(cfg)
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenDataset {
            common,
            out,
            n_subjects,
            n_actions,
        } => {
            let mut cfg = build_config(&common)?;
            if let Some(v) = n_subjects {
                cfg.n_subjects = v;
            }
            if let Some(v) = n_actions {
                cfg.n_actions = v;
            }
            commands::gen_dataset(&cfg, &out)?;
        }
        Command::TrainBase {
            common,
            dataset,
            out,
            epochs,
            resume,
        } => {
            let mut cfg = build_config(&common)?;
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            commands::train_base(&cfg, &dataset, &out, resume)?;
        }
        Command::Transfer {
            common,
            checkpoint,
            dataset,
            pair_id,
            out,
        } => {
            let cfg = build_config(&common)?;
            commands::transfer(&cfg, &checkpoint, &dataset, pair_id, &out)?;
        }
        Command::Evaluate {
            common,
            checkpoint,
            dataset,
            out,
            pairs,
            seeds,
        } => {
            let mut cfg = build_config(&common)?;
            if let Some(v) = pairs {
                cfg.eval_pairs = v;
            }
            if let Some(v) = seeds {
                cfg.eval_seeds = v;
            }
            commands::evaluate(&cfg, &checkpoint, &dataset, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
