use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use l2l::commands::*;
use l2l::trainer::Variant;

#[derive(Parser)]
#[command(name = "l2l", version, about = "Semi-supervised referring segmentation on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Sectioned key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (file for eval and fig1).
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus directory.
    Gen {
        #[command(flatten)]
        g: Global,
    },
    /// Train one variant on a corpus.
    Train {
        #[command(flatten)]
        g: Global,
        #[arg(long)]
        corpus: PathBuf,
        /// Overrides `[train] variant`.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Evaluate a run directory on the corpus test split.
    Eval {
        #[command(flatten)]
        g: Global,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Fixed-threshold sweep plus one adaptive run.
    Sweep {
        #[command(flatten)]
        g: Global,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Model and prior confidence per unlabeled sample.
    Fig1 {
        #[command(flatten)]
        g: Global,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
}

fn require_seed(g: &Global) -> Result<()> {
    if g.seed.is_none() {
        bail!("--seed is required for this command");
    }
    Ok(())
}

fn refuse_existing_file(g: &Global) -> Result<()> {
    if g.out.exists() && !g.force {
        bail!("{} already exists; pass --force to overwrite", g.out.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen { g } => {
            require_seed(&g)?;
            let cfg = resolve_config(g.config.as_deref(), g.seed)?;
            let corpus = cmd_gen(&cfg, &g.out, g.force)?;
            println!("manifest {}", corpus.manifest_hash());
        }
        Command::Train { g, corpus, variant } => {
            require_seed(&g)?;
            let mut train_cfg = resolve_config(g.config.as_deref(), g.seed)?;
            if let Some(v) = variant {
                train_cfg.run.variant = v;
            }
            let (corpus_cfg, data) = load_corpus(&corpus)?;
            let cfg = merge_run_config(&corpus_cfg, &train_cfg);
            let out = cmd_train(&cfg, &data, &g.out, g.force)?;
            println!("{} mean_iou {:.4}", cfg.run.variant, out.final_eval.mean_iou);
        }
        Command::Eval { g, corpus, run } => {
            refuse_existing_file(&g)?;
            let (_, data) = load_corpus(&corpus)?;
            println!("mean_iou {:.4}", cmd_eval(&run, &data, &g.out)?);
        }
        Command::Sweep { g, corpus } => {
            require_seed(&g)?;
            let train_cfg = resolve_config(g.config.as_deref(), g.seed)?;
            let (corpus_cfg, data) = load_corpus(&corpus)?;
            let cfg = merge_run_config(&corpus_cfg, &train_cfg);
            for (label, v) in cmd_sweep(&cfg, &data, &g.out, g.force)? {
                println!("{label} {v:.4}");
            }
        }
        Command::Fig1 { g, corpus, run } => {
            refuse_existing_file(&g)?;
            let (_, data) = load_corpus(&corpus)?;
            let rows = cmd_fig1(&run, &data, &g.out)?;
            let (above, below) = off_diagonal_fractions(&rows, 0.4);
            println!("rows {} model_over_prior {above:.3} prior_over_model {below:.3}", rows.len());
        }
    }
    Ok(())
}
