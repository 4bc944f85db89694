use std::process::ExitCode;

use clap::Parser;
use pbcount::cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(&cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
        // The panic message has already been printed by the default hook.
        Err(_) => ExitCode::from(3),
    }
}
