use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use crossover_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(outcome.report.as_bytes());
            if let Some(msg) = outcome.message {
                eprintln!("crossover: {msg}");
            }
            ExitCode::from(outcome.code)
        }
        Err(e) => {
            eprintln!("crossover: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
