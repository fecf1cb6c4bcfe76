use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use metasaea::commands;
use metasaea::RunConfig;

#[derive(Parser)]
#[command(name = "metasaea", version, about = "Learned dual-control surrogate-assisted multi-objective optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (flat `key = value` file).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Sampling and evaluation threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Full-scale training dimensions and schedule.
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Root seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a meta-policy and write metrics, reward curve and checkpoint.
    Train,
    /// Leave-one-family-out cross-validation.
    Loto,
    /// Greedy rollouts of a checkpoint against a baseline.
    Eval,
    /// Compare surrogate backends along a fixed-criterion run.
    SurrogateBench,
    /// Hypervolume of a CSV point file.
    Hv,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p, cli.paper_scale)?,
        None => RunConfig::parse("", cli.paper_scale)?,
    };
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::Train => {
            let out = commands::cmd_train(&cfg)?;
            let last = out.smoothed.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained on {} tasks for {} rounds; final smoothed reward per true evaluation {last:.4}; checkpoint {}",
                out.tasks.len(),
                out.round_rewards.len(),
                out.checkpoint.display()
            );
        }
        Command::Loto => {
            for f in commands::cmd_loto(&cfg)? {
                println!(
                    "fold {} held out {:<6} test {}: HV {:.4} ± {:.4} over {} repeats",
                    f.fold.fold,
                    f.fold.held_out,
                    f.fold.test_task,
                    f.mean_hv,
                    f.std_hv,
                    f.hvs.len()
                );
            }
        }
        Command::Eval => {
            let out = commands::cmd_eval(&cfg)?;
            println!(
                "{} mean HV {:.4}, {} mean HV {:.4}, log2 ratio {:.4}",
                out.policy, out.mean_policy_hv, out.baseline, out.mean_baseline_hv, out.log2_mean_ratio
            );
        }
        Command::SurrogateBench => {
            for s in commands::cmd_surrogate_bench(&cfg)?.summaries {
                println!(
                    "{} {}: {} steps, RMSE {:.4}, 2σ coverage {:.3}",
                    s.task, s.backend, s.steps, s.rmse, s.coverage_2sigma
                );
            }
        }
        Command::Hv => println!("{}", commands::cmd_hv(&cfg)?),
    }
    Ok(())
}
