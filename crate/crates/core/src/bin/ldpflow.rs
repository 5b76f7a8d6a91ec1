use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use ldpflow::experiments::{run, Subcommand, EXIT_CONFIG};

/// Wasserstein gradient flow and large-deviation experiments on regular grids.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    #[arg(value_enum)]
    subcommand: Subcommand,
    /// Sectioned key-value config; unset keys take their documented defaults.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, default `out/<subcommand>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `[run] seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    match run(cli.subcommand, &cli.config, cli.out.as_deref(), cli.seed) {
        Ok(outcome) => {
            for m in &outcome.messages {
                eprintln!("{m}");
            }
            eprintln!("{}: exit {} ({})", cli.subcommand.name(), outcome.exit_code, outcome.out_dir.display());
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
