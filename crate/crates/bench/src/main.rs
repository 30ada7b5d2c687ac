use std::process::ExitCode;

use clap::Parser;
use tif_bench::cli::{execute, init_threads, Cli};
use tif_bench::error::BenchError;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("{}", BenchError::Usage(first.to_string()).to_line());
            return ExitCode::from(2);
        }
    };
    match init_threads().and_then(|()| execute(&cli)) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::FAILURE
        }
    }
}
