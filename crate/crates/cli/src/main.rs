use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use corro_cli::commands::{cmd_collect, cmd_eval, cmd_oracle, cmd_report, cmd_train};
use corro_cli::ExperimentConfig;
use corro_core::evalkit::Protocol;
use corro_core::{Error, Result};

#[derive(Parser)]
#[command(name = "corro", about = "Offline meta-RL with contrastive task representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Evaluation protocol: iid, ood or random.
    #[arg(long, global = true)]
    protocol: Option<String>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train behavior policies and write datasets and checkpoints.
    Collect,
    /// Train negative-pair models, the transition encoder and the meta-policy.
    Train,
    /// Evaluate the trained meta-policy on the test tasks.
    Eval,
    /// Check the mutual-information bound on a tabulated instance.
    Oracle {
        /// Tabulation file; a random instance is drawn from the seed if absent.
        tabulation: Option<PathBuf>,
    },
    /// Summarize evaluation reports and export embeddings.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::parse("")?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if cli.protocol.is_some() && !matches!(cli.command, Command::Eval) {
        return Err(Error::Config("--protocol only applies to `eval`".into()));
    }
    match &cli.command {
        Command::Collect => println!("wrote {}", cmd_collect(&cfg)?.display()),
        Command::Train => println!("wrote {}", cmd_train(&cfg)?.display()),
        Command::Eval => {
            let name = cli.protocol.as_deref().unwrap_or("iid");
            println!("wrote {}", cmd_eval(&cfg, Protocol::from_name(name)?)?.display());
        }
        Command::Oracle { tabulation } => print!("{}", cmd_oracle(&cfg, tabulation.as_deref())?),
        Command::Report => print!("{}", cmd_report(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
