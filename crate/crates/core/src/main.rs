use std::process::ExitCode;

use clap::Parser;
use sfa_core::cli::{run, Cli};

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("sfa: one or more checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("sfa: {e}");
            ExitCode::FAILURE
        }
    }
}
