//! `lsr`: synthesize data, train, self-reinforce, predict and evaluate.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let log = commands::Log { quiet: cli.quiet };
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a, &log),
        Command::Train(a) => commands::train(a, &log),
        Command::Reinforce(a) => commands::reinforce(a, &log),
        Command::Predict(a) => commands::predict(a, &log),
        Command::Eval(a) => commands::eval(a, &log),
        Command::Export(a) => commands::export(a, &log),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
