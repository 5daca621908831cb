use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mnr::cli::{execute, Command};
use mnr::prompt::Stage;

/// Counterfactual narrative pipeline.
#[derive(Parser)]
#[command(name = "mnr", version)]
struct Args {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "mnr.toml")]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Train the decision-tree oracle and report its accuracy.
    TrainOracle,
    /// Search minimal counterfactuals for the selected rows.
    GenCf,
    /// Check every stored pair against the oracle.
    CheckCf,
    /// Generate and score narratives for the stored pairs.
    Run,
    /// Build a distillation dataset from teacher replies.
    BuildKd {
        #[arg(long)]
        stage: Stage,
    },
    /// Measure energy and time of narrative generation.
    Profile,
    /// Score an existing narratives file.
    Score {
        #[arg(long)]
        narratives: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let message = e.render().to_string();
            let error = serde_json::json!({"error": {"kind": "usage", "message": message.trim()}});
            eprintln!("{error}");
            return ExitCode::from(2);
        }
    };
    let command = match args.command {
        Sub::TrainOracle => Command::TrainOracle,
        Sub::GenCf => Command::GenCf,
        Sub::CheckCf => Command::CheckCf,
        Sub::Run => Command::Run,
        Sub::BuildKd { stage } => Command::BuildKd { stage },
        Sub::Profile => Command::Profile,
        Sub::Score { narratives } => Command::Score { narratives },
    };
    match execute(&args.config, args.seed, args.out, &command) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
