use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bayes_irl::error::Error;
use bayes_irl::estimation::Variant;
use bayes_irl::experiment::{cmd_certify, cmd_gen_expert, cmd_sweep_lambda, cmd_train, RunConfig};

/// Reproducible gridworld experiments for joint reward/dynamics estimation.
#[derive(Parser)]
#[command(name = "bayes-irl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, overriding `[output] dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Variant override: bm_irl, rm_irl, or two_stage.
    #[arg(long, global = true)]
    variant: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the gridworld, solve the expert, and write the dataset files.
    GenExpert,
    /// Train the configured variant on a generated dataset.
    Train,
    /// Run the λ grid plus the two-stage baseline and emit the comparison CSV.
    SweepLambda,
    /// Certify decomposition, bounds, and the witness for saved checkpoints.
    Certify,
}

fn parse_variant(text: &str) -> Result<Variant, Error> {
    match text {
        "bm_irl" => Ok(Variant::BmIrl),
        "rm_irl" => Ok(Variant::RmIrl),
        "two_stage" => Ok(Variant::TwoStage),
        other => Err(Error::InvalidConfig(format!(
            "unknown variant `{other}` (expected bm_irl, rm_irl, or two_stage)"
        ))),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = cli.out {
        cfg.output.dir = out;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(variant) = &cli.variant {
        cfg.train.variant = parse_variant(variant)?;
    }
    match cli.command {
        Command::GenExpert => cmd_gen_expert(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::SweepLambda => cmd_sweep_lambda(&cfg),
        Command::Certify => cmd_certify(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
