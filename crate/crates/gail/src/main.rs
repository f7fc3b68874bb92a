use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gail::config::AlgoKey;
use gail::{commands, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "gail", version, about = "Adversarial imitation learning on tabular MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat TOML config; relative paths inside resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `alt` or `greedy`.
    #[arg(long, global = true)]
    algo: Option<AlgoKey>,
    /// Use the step and batch sizes from the convergence analysis.
    #[arg(long, global = true)]
    strict_theory: bool,
    /// Reward ascent steps per iteration.
    #[arg(long, global = true)]
    reward_updates: Option<usize>,
    #[arg(long, global = true)]
    iters: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Sample expert demonstrations and save the expert policy.
    DemoGen,
    /// Run the alternating or greedy optimizer.
    Train,
    /// Evaluate a policy checkpoint against the expert.
    Eval,
    /// Measure the empirical-vs-exact distance gap over sample sizes.
    GenGap,
    /// Tabulate the generalization bound over sample sizes.
    Bounds,
    /// Compare estimated constants with held-out observations.
    Audit,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ov = Overrides {
        seed: cli.seed,
        out: cli.out,
        algo: cli.algo,
        strict_theory: cli.strict_theory,
        reward_updates: cli.reward_updates,
        iters: cli.iters,
    };
    let run = RunConfig::load(cli.config.as_deref(), &ov).and_then(|cfg| match cli.command {
        Command::DemoGen => commands::demo_gen(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::GenGap => commands::gen_gap(&cfg),
        Command::Bounds => commands::bounds(&cfg),
        Command::Audit => commands::audit(&cfg),
    });
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
