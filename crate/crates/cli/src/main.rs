//! `fpmine`: command-line driver for false-positive mining retrieval.

mod args;
mod commands;
mod error;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::Context;
use error::{CliError, CliResult};

fn run(cli: Cli) -> CliResult<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    pool.build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let ctx = Context { quiet: cli.quiet };
    match cli.command {
        Command::GenData(a) => commands::gen_data(a, &ctx),
        Command::Train(a) => commands::train(a, &ctx),
        Command::Eval(a) => commands::eval(a, &ctx),
        Command::Ablate(a) => commands::ablate(a, &ctx),
        Command::Gradcheck(a) => commands::gradcheck_cmd(a, &ctx),
        Command::Replay(a) => commands::replay(&a.manifest, &a.out, &ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are config errors; --help and --version succeed.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fpmine: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
