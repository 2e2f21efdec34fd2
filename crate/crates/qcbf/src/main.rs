use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let args = qcbf::cli::Cli::parse();
    match qcbf::cli::run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
