//! The `kgc` command line: train, evaluate, predict, export-embeddings and
//! sweep over a TSV dataset.
//!
//! Exit codes: 0 on success, 1 for usage or data errors, 2 when training
//! produces non-finite values.

pub mod args;
pub mod commands;
pub mod config;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use commands::CliError;

pub fn run(args: Vec<OsString>) -> u8 {
    let args = match config::splice_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let res: Result<(), CliError> = match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Predict(a) => commands::predict(a),
        Command::ExportEmbeddings(a) => commands::export_embeddings(a),
        Command::Sweep(a) => commands::sweep(a),
    };
    match res {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
