use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use markovgen::config::{ExperimentConfig, ExperimentKind};
use markovgen::runner;
use markovgen::CliError;

#[derive(Parser)]
#[command(name = "markovgen", version, about = "Run markovgen experiments from a TOML config")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment named by `kind` in the config.
    Run(Common),
    /// Simulate a sampler and compare its end law with the exact marginal.
    SamplePath(Common),
    /// Train blockwise networks and evaluate them against the oracle.
    Train(Common),
    /// Exact-oracle property suite and selected acceptance criteria.
    Verify(Common),
    /// Error-versus-budget experiment with a fitted log-log slope.
    Rate(Common),
    /// Step-size sweep of the exact-drift flow.
    Discretization(Common),
    /// Ornstein-Uhlenbeck trajectories, histogram and moments.
    OuFigures(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config, defaults to `out/<kind>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve(command: Command) -> Result<(ExperimentKind, ExperimentConfig, String, PathBuf), CliError> {
    let (sub, common) = match command {
        Command::Run(c) => (None, c),
        Command::SamplePath(c) => (Some(ExperimentKind::SamplePath), c),
        Command::Train(c) => (Some(ExperimentKind::Train), c),
        Command::Verify(c) => (Some(ExperimentKind::Verify), c),
        Command::Rate(c) => (Some(ExperimentKind::Rate), c),
        Command::Discretization(c) => (Some(ExperimentKind::Discretization), c),
        Command::OuFigures(c) => (Some(ExperimentKind::OuFigures), c),
    };
    let (mut cfg, text) = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => (ExperimentConfig::default(), String::new()),
    };
    let kind = match (sub, cfg.kind) {
        (Some(s), Some(k)) if s != k => {
            return Err(CliError::config(format!("config kind `{}` does not match subcommand `{}`", k.name(), s.name())));
        }
        (Some(s), _) => s,
        (None, Some(k)) => k,
        (None, None) => return Err(CliError::config("`run` needs `kind` in the config")),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let out = common.out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out").join(kind.name()));
    Ok((kind, cfg, text, out))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = resolve(cli.command).and_then(|(kind, cfg, text, out)| runner::execute(kind, &cfg, &text, &out));
    match result {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            println!("wrote {} files to {}", outcome.files.len(), outcome.out_dir.display());
            if outcome.violated {
                eprintln!("error: at least one check was violated");
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
