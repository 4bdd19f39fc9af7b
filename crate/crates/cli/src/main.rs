//! `audiocap`: prepare datasets, train, caption, evaluate and self-test.

mod commands;

use std::process::ExitCode;

use clap::Parser;

use commands::{Cli, Usage};

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<audiocap::Error>() {
            return match e.class() {
                audiocap::error::ErrorClass::Usage => 1,
                audiocap::error::ErrorClass::Data => 2,
                audiocap::error::ErrorClass::Numeric => 3,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
