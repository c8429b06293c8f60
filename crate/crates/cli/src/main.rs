use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match rkd_cli::run(rkd_cli::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
