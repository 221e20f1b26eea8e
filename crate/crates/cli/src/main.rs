use std::process::ExitCode;

use clap::Parser;
use emofuse::{exit_code, init_threads, run, Cli, RunConfig};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads()
        .and_then(|()| RunConfig::resolve(&cli.flags))
        .and_then(|cfg| run(cli.command, &cfg));
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
