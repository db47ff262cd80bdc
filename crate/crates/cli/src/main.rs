use std::path::PathBuf;
use std::process::ExitCode;

use adaptive_ntk_cli::{dump_ntk, run, CliError, Experiment, ExperimentConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "adaptive-ntk",
    version,
    about = "Adaptive NTK loss-weighting experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its CSV artifacts.
    Run {
        /// poisson-convergence, quadratic-mc or wave-pinn
        experiment: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the exact kernel at a training step as CSV.
    DumpNtk {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        step: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            experiment,
            config,
            seed,
            out,
        } => {
            let wanted: Experiment = experiment.parse()?;
            let cfg = ExperimentConfig::load(&config, seed)?;
            if cfg.experiment != wanted {
                return Err(CliError::Config(format!(
                    "config is for `{}`, not `{wanted}`",
                    cfg.experiment
                )));
            }
            let report = run(&cfg, &out)?;
            println!("{}", report.summary());
        }
        Command::DumpNtk { config, step, seed } => {
            let cfg = ExperimentConfig::load(&config, seed)?;
            print!("{}", dump_ntk(&cfg, step)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
