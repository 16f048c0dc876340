use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use deconvparse_cli::{configure_threads, dispatch, parse_config, Command};

/// Scene parsing with deconvolutional feature layers.
#[derive(Parser)]
#[command(name = "deconvparse", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// key=value run configuration
    #[arg(long)]
    config: PathBuf,
    /// Directory receiving every artifact
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config's network seed
    #[arg(long)]
    seed: Option<u64>,
}

fn run(args: Args) -> anyhow::Result<()> {
    configure_threads()?;
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    let mut cfg = parse_config(&text).with_context(|| format!("in {}", args.config.display()))?;
    if let Some(s) = args.seed {
        cfg.network.seed = s;
    }
    let written = dispatch(args.command, &cfg, &args.out)
        .with_context(|| format!("{} failed", args.command.name()))?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
