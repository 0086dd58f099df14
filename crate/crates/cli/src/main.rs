mod args;
mod commands;
mod error;

use args::{Cli, Command};
use clap::{CommandFactory, Parser};
use error::{CliError, CliResult};
use std::process::ExitCode;

fn run(cli: &Cli) -> CliResult<String> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Compare(a) => commands::compare(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::VizCorr(a) => commands::viz_corr(a),
        Command::GenData(a) => commands::gen_data(a),
        Command::Selftest => commands::selftest(),
    }
}

fn main() -> ExitCode {
    let argv = match args::expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}\n\n{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() && !e.to_string().contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, CliError::Usage(_)) {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            e.exit_code()
        }
    }
}
