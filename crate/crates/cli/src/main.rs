use std::io::{self, Write};
use std::process::ExitCode;

use clap::Parser;
use hbnn_cli::commands::{run, Cli};
use hbnn_cli::exit_code;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut log = io::stderr();
    let result = run(cli, &mut out, &mut log);
    let _ = out.flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
