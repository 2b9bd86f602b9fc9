use std::process::ExitCode;

use clap::Parser;
use logitshift_cli::{run, Cli, Status};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(status) => {
            if let Status::Failed(names) = &status {
                eprintln!("verification failed: {}", names.join(", "));
            }
            ExitCode::from(status.exit_code())
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
