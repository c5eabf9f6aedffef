//! `epiflow` command line: scene synthesis, robust essential-matrix
//! estimation, gradient checking, loss evaluation and odometry/flow
//! metrics over plain files.

mod commands;
mod errors;
mod manifest;
mod sceneconfig;

use clap::{Parser, Subcommand};

use commands::{
    cmd_estimate, cmd_eval_flow, cmd_eval_odom, cmd_gradcheck, cmd_losses, cmd_replay, cmd_synth,
    EstimateArgs, EvalFlowArgs, EvalOdomArgs, GradcheckArgs, LossesArgs, ReplayArgs, SynthArgs,
};
use errors::CliError;

#[derive(Parser, Debug)]
#[command(name = "epiflow", version, about)]
struct Cli {
    /// Worker threads (0 = all cores). Results are identical regardless.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic two-view scene directory
    Synth(SynthArgs),
    /// Estimate the essential matrix and relative pose from correspondences
    Estimate(EstimateArgs),
    /// Check analytic argmin-layer gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Relative translational/rotational trajectory errors
    EvalOdom(EvalOdomArgs),
    /// Average endpoint error between two flow fields
    EvalFlow(EvalFlowArgs),
    /// Per-term loss breakdown for a scene under a weight preset
    Losses(LossesArgs),
    /// Re-run a command from its manifest
    Replay(ReplayArgs),
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| CliError::config(e.to_string()))?;
    }
    match &cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::EvalOdom(args) => cmd_eval_odom(args),
        Command::EvalFlow(args) => cmd_eval_flow(args),
        Command::Losses(args) => cmd_losses(args),
        Command::Replay(args) => cmd_replay(args),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}
