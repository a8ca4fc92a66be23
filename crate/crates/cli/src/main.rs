use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use stablegrasp_cli::{run, Cli, EXIT_INVALID};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STABLEGRASP_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INVALID } else { 0 });
        }
    };
    match run(cli) {
        Ok(outcome) => {
            let mut out = std::io::stdout().lock();
            let _ = out.write_all(outcome.stdout.as_bytes());
            let _ = out.flush();
            for msg in &outcome.no_result {
                eprintln!("no result: {msg}");
            }
            ExitCode::from(outcome.exit_code())
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
