use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mghl::config::{parse_seeds, parse_subgoals};
use mghl::{run_ablation, run_eval, run_train, CliError, EvalOptions, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "mghl", version, about = "Train and evaluate multi-goal hierarchical agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds, e.g. 1,2,3.
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    actors: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent per seed.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated subset of pc, dc, fc, rand.
        #[arg(long)]
        subgoals: Option<String>,
    },
    /// Compare pc, pc+fc and pc+fc+dc over the configured seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Also run pc+fc+dc with a random subgoal added.
        #[arg(long)]
        robustness: bool,
    },
    /// Play episodes with a saved agent.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: usize,
        /// Run config; defaults to the config.toml saved with the run.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample actions instead of acting greedily.
        #[arg(long)]
        sample: bool,
    },
}

fn load(run: &RunArgs, subgoals: Option<&str>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&run.config)?;
    cfg.apply(&Overrides {
        seeds: run.seed.as_deref().map(parse_seeds).transpose()?,
        actors: run.actors,
        subgoals: subgoals.map(parse_subgoals).transpose()?,
        out_dir: run.out.clone(),
    });
    Ok(cfg)
}

fn main_inner(cli: Cli) -> Result<(), CliError> {
    let mut log = |line: &str| println!("{line}");
    match cli.command {
        Command::Train { run, subgoals } => {
            let cfg = load(&run, subgoals.as_deref())?;
            run_train(&cfg, &mut log)?;
        }
        Command::Ablate { run, robustness } => {
            let cfg = load(&run, None)?;
            run_ablation(&cfg, robustness, &mut log)?;
        }
        Command::Eval { checkpoint, episodes, config, seed, sample } => {
            let report = run_eval(&checkpoint, &EvalOptions { episodes, seed, sample, config })?;
            print!("{}", report.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
