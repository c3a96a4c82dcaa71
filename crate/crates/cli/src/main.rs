//! `mlppo`: permeability sampling, scenario clustering, training, analysis
//! and evaluation from one TOML configuration.

mod commands;
mod config;
mod failure;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use config::RunConfig;
use failure::Failure;

#[derive(Parser, Debug)]
#[command(name = "mlppo", version, about = "Multilevel PPO for waterflooding control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true, env = "MLPPO_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides `io.seed`.
    #[arg(long, global = true, env = "MLPPO_SEED")]
    seed: Option<u64>,
    /// Overrides `io.out`.
    #[arg(long, global = true, env = "MLPPO_OUT")]
    out: Option<PathBuf>,
    /// Checkpoint to continue training from.
    #[arg(long, global = true, env = "MLPPO_RESUME")]
    resume: Option<PathBuf>,
    /// Checkpoint holding the policy for `analyze` and `eval`.
    #[arg(long, global = true, env = "MLPPO_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Draw `perm.n` permeability fields and write them with a manifest.
    SamplePerm,
    /// Pick `cluster.k` representative fields out of `cluster.n_samples`.
    Cluster,
    /// Train a policy (classic for one level, multilevel otherwise).
    Train,
    /// Multilevel Monte Carlo analysis of the loss; random policy without
    /// `--checkpoint`.
    Analyze,
    /// Per-permeability rewards of a checkpoint next to the equal-rate
    /// baseline.
    Eval,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::SamplePerm => "sample-perm",
            Command::Cluster => "cluster",
            Command::Train => "train",
            Command::Analyze => "analyze",
            Command::Eval => "eval",
        }
    }
}

#[derive(Serialize)]
struct Metadata<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_sha256: String,
    config: String,
    resume: Option<&'a Path>,
    checkpoint: Option<&'a Path>,
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.io.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.io.out = o.clone();
    }
    cfg.validate()?;
    if let Command::Train = cli.command {
        cfg.algorithm()?;
    }
    let text = cfg.to_toml();
    let meta = Metadata {
        command: cli.command.name(),
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.io.seed,
        config_sha256: format!("{:x}", Sha256::digest(text.as_bytes())),
        config: text,
        resume: cli.resume.as_deref(),
        checkpoint: cli.checkpoint.as_deref(),
    };
    std::fs::create_dir_all(&cfg.io.out).map_err(|e| Failure::Io(format!("{}: {e}", cfg.io.out.display())))?;
    let meta_path = cfg.io.out.join(format!("metadata-{}.json", meta.command));
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("metadata serializes"))
        .map_err(|e| Failure::Io(format!("{}: {e}", meta_path.display())))?;
    match cli.command {
        Command::SamplePerm => commands::sample_perm(&cfg),
        Command::Cluster => commands::cluster(&cfg),
        Command::Train => commands::train(&cfg, cli.resume.as_deref()),
        Command::Analyze => commands::analyze(&cfg, cli.checkpoint.as_deref()),
        Command::Eval => commands::eval(&cfg, cli.checkpoint.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MLPPO_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
