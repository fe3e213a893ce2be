//! Command-line front end: configuration layering, the stage commands and
//! the end-to-end pipeline with its manifest.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod args;
pub mod commands;
pub mod error;
pub mod pipeline;
pub mod render;

pub use error::{CliError, CliResult};

use args::{Cli, Command};

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Sft(a) => commands::sft(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Report(a) => commands::report(a),
        Command::Compare(a) => commands::compare(a),
        Command::Run(a) => {
            let m = pipeline::run(a)?;
            println!("run complete: {}", a.out_dir.join(pipeline::MANIFEST).display());
            for (path, digest) in m.artifact_digests() {
                println!("  {path:<22} {}", &digest[..16]);
            }
            Ok(())
        }
    }
}
