use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sfdiv_cli::{oracle_suite, plot, run, CliError, OUT_ENV};

#[derive(Parser)]
#[command(name = "sfdiv", version, about = "Diverse near-optimal policy sets for tabular MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every entry of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output root; one subdirectory per run.
        #[arg(long, env = OUT_ENV, default_value = "results")]
        out: PathBuf,
        /// Runs executed in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the oracle suite and compare against (or rewrite) its golden file.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        regen: bool,
    },
    /// Render figures for a run directory or an output root.
    Plot {
        #[arg(long)]
        result: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out, jobs } => {
            for r in run::cmd_run(&config, &out, jobs)? {
                let note = if r.flagged > 0 {
                    format!(" ({} flagged)", r.flagged)
                } else {
                    String::new()
                };
                println!("{}: {} files in {}{note}", r.name, r.files.len(), r.dir.display());
            }
        }
        Command::Oracle { config, regen } => {
            let o = oracle_suite::cmd_oracle(&config, regen)?;
            let verb = if o.regenerated { "wrote" } else { "matched" };
            println!("{verb} {} golden values ({})", o.values.len(), o.golden_path.display());
        }
        Command::Plot { result } => {
            let files = plot::cmd_plot(&result)?;
            println!("wrote {} figures", files.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
