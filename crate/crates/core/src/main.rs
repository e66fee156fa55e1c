use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unigrec::commands::{Command, Experiment, ExperimentConfig, Outcome};
use unigrec::train::AblationRung;

/// Generative recommendation with differentiable soft item identifiers.
#[derive(Parser)]
#[command(name = "unigrec", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML, or JSON with a .json extension).
    #[arg(long)]
    config: PathBuf,
    /// Rerun even when the manifest says outputs are current.
    #[arg(long)]
    force: bool,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Load or synthesize interactions and item embeddings.
    Prepare(Common),
    /// Train the collaborative teacher and export its item table.
    TrainTeacher(Common),
    /// Stage 1: pretrain the tokenizer on item embeddings.
    Pretrain(Common),
    /// Stage 2: train tokenizer and recommender together.
    Joint(Common),
    /// Beam-search evaluation on the validation and test splits.
    Eval(Common),
    /// Collision, entropy, identifier-change and PCA tables.
    Analyze(Common),
    /// Run ablation rungs and write the metrics table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated rungs (M0..M6); defaults to the config list.
        #[arg(long, value_delimiter = ',')]
        rungs: Option<Vec<String>>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (command, common, rungs) = match cli.command {
        Cmd::Prepare(c) => (Command::Prepare, c, None),
        Cmd::TrainTeacher(c) => (Command::TrainTeacher, c, None),
        Cmd::Pretrain(c) => (Command::Pretrain, c, None),
        Cmd::Joint(c) => (Command::Joint, c, None),
        Cmd::Eval(c) => (Command::Eval, c, None),
        Cmd::Analyze(c) => (Command::Analyze, c, None),
        Cmd::Ablate { common, rungs } => (Command::Ablate, common, rungs),
    };
    match run(command, &common, rungs) {
        Ok(Outcome::Ran) => ExitCode::SUCCESS,
        Ok(Outcome::UpToDate) => {
            eprintln!("{command}: up to date");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command, common: &Common, rungs: Option<Vec<String>>) -> unigrec::Result<Outcome> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config = config.with_seed(seed);
    }
    let out = std::env::var_os("UNIGREC_OUT").map(PathBuf::from);
    let rungs = rungs
        .map(|r| r.iter().map(|s| AblationRung::parse(s.trim())).collect::<unigrec::Result<Vec<_>>>())
        .transpose()?;
    Experiment::new(config, out).run_with(command, common.force, rungs.as_deref())
}
