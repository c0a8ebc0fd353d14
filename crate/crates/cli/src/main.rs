mod args;
mod commands;
mod failure;
mod manifest;
mod resolve;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => commands::train_cmd(a),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::Gradcheck(a) => commands::gradcheck_cmd(a),
        Command::Report(a) => commands::report_cmd(a),
        Command::Compare(a) => commands::compare_cmd(a),
        Command::Ablate(a) => commands::ablate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
