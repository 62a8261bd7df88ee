use std::path::PathBuf;
use std::process::ExitCode;

use branch_distill_cli::{cmd_ablate, cmd_distill, cmd_eval, cmd_train, exit_code, Settings};
use clap::{Parser, Subcommand};

/// Multi-branch adversarial self-distillation experiments.
///
/// Any config key can be overridden with `--key value`; flags win over the
/// config file.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Flat key=value config file, or a run manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides as `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Self-distillation training from scratch.
    Train(Common),
    /// Teacher-student distillation (set `teacher` to a checkpoint).
    Distill(Common),
    /// Accuracy and size of every classifier in a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// The CE / +KL / +L2 / +W ladder over `seeds`.
    Ablate(Common),
}

fn settings(c: &Common) -> branch_distill::Result<Settings> {
    let mut s = match &c.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    s.apply_flags(&c.overrides)?;
    Ok(s)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut out = std::io::stdout();
    let result = match &cli.command {
        Command::Train(c) => settings(c).and_then(|s| cmd_train(&s, &mut out).map(drop)),
        Command::Distill(c) => settings(c).and_then(|s| cmd_distill(&s, &mut out).map(drop)),
        Command::Eval { checkpoint, common } => settings(common).and_then(|s| cmd_eval(&s, checkpoint, &mut out).map(drop)),
        Command::Ablate(c) => settings(c).and_then(|s| cmd_ablate(&s, &mut out).map(drop)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
