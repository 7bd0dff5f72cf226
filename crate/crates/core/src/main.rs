use std::process::ExitCode;

use clap::Parser;
use msunet::cli::{run, Cli};

fn main() -> ExitCode {
    run(Cli::parse())
}
