use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use pixrl::config::TrainConfig;
use pixrl::plot::emit_plot;
use pixrl::trainer::{train_with, Trainer};

#[derive(Parser)]
#[command(name = "pixrl", version, about = "Pixel-based SAC with ViT/CNN encoders and auxiliary tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its metrics CSV and checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written under the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with deterministic actions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
    /// Draw learning curves from metrics files into an SVG.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, seed, out, resume } => {
            let mut cfg = TrainConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let outcome = train_with(cfg, &out, resume.as_deref(), |row| {
                println!(
                    "step {:>7}  return {:8.2} ± {:<7.2} critic {:.4}  actor {:.4}  aux {:.4}  alpha {:.4}",
                    row.agent_step,
                    row.mean_return,
                    row.std_return,
                    row.rl_critic_loss,
                    row.rl_actor_loss,
                    row.aux_loss,
                    row.alpha
                );
            })?;
            println!("metrics: {}", outcome.metrics_path.display());
            println!("checkpoint: {}", outcome.checkpoint_path.display());
        }
        Command::Eval { checkpoint, episodes } => {
            if episodes == 0 {
                bail!("--episodes must be positive");
            }
            let t = Trainer::load_checkpoint(&checkpoint, None)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let r = t.evaluate(episodes)?;
            for (i, ret) in r.returns.iter().enumerate() {
                println!("episode {i}: {ret:.2}");
            }
            println!("mean {:.2} std {:.2} over {episodes} episodes", r.mean, r.std);
        }
        Command::Plot { inputs, out } => {
            let curves = emit_plot(&inputs, &out)?;
            println!("wrote {} curve(s) to {}", curves.len(), out.display());
        }
    }
    Ok(())
}
