use std::process::ExitCode;

use clap::Parser;
use lsocv::cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LSOCV_LOG_LEVEL", "warn")).init();
    ExitCode::from(run(Cli::parse()))
}
