use std::process::ExitCode;

use clap::Parser;
use contextvit::cli::{dispatch, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(outcome) => {
            println!("{}", outcome.run_dir.display());
            if outcome.success {
                ExitCode::SUCCESS
            } else {
                eprintln!("{} finished with failed checks", cli.command.name());
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
