//! `mvae`: corpus generation, CVAE training, mixing, separation and evaluation.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "mvae", version, about = "Multichannel source separation with ILRMA and CVAE source models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Flat `key = value` file; flags win on conflict.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads; every path is sequential, so any value gives identical output.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Add wall-clock timings to report.json (breaks byte-identical reruns).
    #[arg(long)]
    pub timings: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the labeled synthetic corpus.
    Corpus(commands::CorpusArgs),
    /// Train a CVAE source model on a corpus.
    Train(commands::TrainArgs),
    /// Mix mono sources into a multichannel recording.
    Mix(commands::MixArgs),
    /// Separate a multichannel mixture.
    Separate(commands::SeparateArgs),
    /// Score estimates against reference signals.
    Eval(commands::EvalArgs),
    /// Print checkpoint metadata as JSON.
    Inspect(commands::InspectArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (out, result) = match &cli.command {
        Command::Corpus(a) => (Some(a.out.clone()), commands::corpus(a)),
        Command::Train(a) => (Some(a.out.clone()), commands::train(a)),
        Command::Mix(a) => (Some(a.out.clone()), commands::mix(a)),
        Command::Separate(a) => (Some(a.out.clone()), commands::separate(a)),
        Command::Eval(a) => (Some(a.out.clone()), commands::eval(a)),
        Command::Inspect(a) => (a.out.clone(), commands::inspect(a)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(out, &e),
    }
}

fn report_error(out: Option<PathBuf>, e: &CliError) -> ExitCode {
    eprintln!("error: {e}");
    if e.exit_code() == 1 {
        eprintln!("run `mvae <command> --help` for usage");
    }
    if let Some(dir) = out.filter(|d| d.is_dir()) {
        let body = serde_json::json!({
            "exit_code": e.exit_code(),
            "kind": e.kind(),
            "message": e.to_string(),
        });
        let _ = std::fs::write(dir.join("error.json"), format!("{body:#}\n"));
    }
    ExitCode::from(e.exit_code())
}
