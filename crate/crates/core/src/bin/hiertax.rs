use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use hiertax::metrics::AucPopulation;
use hiertax::runner::{run, Command, RunOptions};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Gen,
    Split,
    Prep,
    Train,
    Eval,
    Compare,
    Gradcheck,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Population {
    All,
    Applicable,
}

/// Hierarchical classification experiments over a taxonomy tree.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,

    /// Experiment config (`key = value` lines).
    #[arg(long)]
    config: PathBuf,

    /// Root seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Samples entering each node's AUC.
    #[arg(long, value_enum)]
    auc_population: Option<Population>,

    /// Train strategies on separate threads (compare only).
    #[arg(long)]
    parallel: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let command = match cli.command {
        Cmd::Gen => Command::Gen,
        Cmd::Split => Command::Split,
        Cmd::Prep => Command::Prep,
        Cmd::Train => Command::Train,
        Cmd::Eval => Command::Eval,
        Cmd::Compare => Command::Compare,
        Cmd::Gradcheck => Command::Gradcheck,
    };
    let opts = RunOptions {
        seed: cli.seed,
        out: cli.out,
        population: cli.auc_population.map(|p| match p {
            Population::All => AucPopulation::All,
            Population::Applicable => AucPopulation::Applicable,
        }),
        parallel: cli.parallel,
    };
    match run(command, &cli.config, &opts) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
