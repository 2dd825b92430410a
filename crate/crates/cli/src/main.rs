//! `pixelda`: synthesize, train, adapt, evaluate, audit and repeat runs from a TOML config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use pixelda_core::Error;

use commands::Command;

#[derive(Debug, Parser)]
#[command(name = "pixelda", version, about = "Pixel-level domain adaptation")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML run configuration; profile defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.learning_rate=2e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Continue training from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Diverged { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.resume && cli.command != Command::Train {
        eprintln!("error: --resume only applies to train");
        return ExitCode::from(2);
    }
    let result = config::load(cli.config.as_deref(), &cli.overrides)
        .and_then(|cfg| commands::run(cli.command, &cfg, &cli.out, cli.resume));
    match result {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
