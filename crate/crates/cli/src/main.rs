use std::process::ExitCode;

use clap::Parser;
use hdmba_cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    hdmba::tensor::deterministic_from_env();
    match run(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
