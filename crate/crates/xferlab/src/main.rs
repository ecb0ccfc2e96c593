use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xferlab::commands;
use xferlab::{run_grid, Candidate, HarnessConfig, HarnessError, Method};

#[derive(Parser)]
#[command(
    name = "xferlab",
    version,
    about = "Constrained domain adaptation experiments for transducer models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic datasets listed in the config's generate section.
    Generate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the base model on the original domain.
    TrainBase {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a base checkpoint with a single candidate.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long, value_parser = ["encoder", "decoder", "joint", "finetune"])]
        position: String,
        #[arg(long, default_value_t = 0)]
        hidden: usize,
        #[arg(long, default_value_t = 0.0)]
        dropout: f64,
        #[arg(long, default_value_t = 0.0)]
        sdepth: f64,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every grid cell and select the winners.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one or more dataset directories.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = xferlab_core::model::decode::DEFAULT_MAX_SYMBOLS_PER_FRAME)]
        max_symbols: usize,
    },
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Generate { config } => {
            let cfg = HarnessConfig::load(&config)?;
            commands::generate(&cfg)?;
            for g in &cfg.generate {
                println!(
                    "wrote {} and {}",
                    g.train_dir.display(),
                    g.eval_dir.display()
                );
            }
        }
        Command::TrainBase { config, out } => {
            let cfg = HarnessConfig::load(&config)?;
            let res = commands::train_base(&cfg, &out)?;
            println!(
                "checkpoint {} (final loss {:.4})",
                res.checkpoint.display(),
                res.final_loss
            );
            for r in &res.reports {
                println!("{}\tWER {:.2}", r.dataset_id, r.wer);
            }
        }
        Command::Adapt {
            config,
            base,
            position,
            hidden,
            dropout,
            sdepth,
            steps,
            lr,
            seed,
            out,
        } => {
            let cfg = HarnessConfig::load(&config)?;
            let method: Method = position.parse()?;
            let cand = match method {
                Method::Finetune => Candidate::finetune(steps, lr),
                m => Candidate {
                    method: m,
                    hidden_dim: hidden,
                    dropout,
                    stochastic_depth: sdepth,
                    steps,
                    lr,
                },
            };
            let res = commands::adapt(&cfg, &base, &cand, seed, &out)?;
            println!(
                "{}: a_werr {:.4} o_scale {:.4} score {:.4}{}",
                res.candidate_id,
                res.score.a_werr,
                res.score.o_scale,
                res.score.score,
                if res.score.kappa_violated {
                    " (kappa violated)"
                } else {
                    ""
                }
            );
        }
        Command::Grid { config, jobs, out } => {
            let cfg = HarnessConfig::load(&config)?;
            let res = run_grid(&cfg, jobs, &out)?;
            println!(
                "cells: {}, failures: {}, over budget: {}",
                res.ranking.len(),
                res.failures.len(),
                res.over_budget.len()
            );
            println!(
                "constrained winner: {}",
                res.constrained_winner.as_deref().unwrap_or("none")
            );
            println!(
                "unconstrained winner: {}",
                res.unconstrained_winner.as_deref().unwrap_or("none")
            );
        }
        Command::Evaluate {
            ckpt,
            data,
            out,
            max_symbols,
        } => {
            for r in commands::evaluate(&ckpt, &data, &out, max_symbols)? {
                println!("{}\tWER {:.2}", r.dataset_id, r.wer);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
