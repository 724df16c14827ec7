//! `prunenet`: pretrain, prune, rewrite, finetune, evaluate and analyze
//! CNNs from the command line.
//!
//! Failures print one JSON line to stderr of the form
//! `{"error":"<kind>","message":"..."}` and exit with status 1.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{CommonArgs, RunConfig, Stage};

#[derive(Parser, Debug)]
#[command(name = "prunenet", version, about = "Structured filter pruning with a multitask pruner network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the unpruned baseline; writes baseline.ckpt.
    Pretrain(CommonArgs),
    /// Run the alternating pruning loop; writes pruning.ckpt with the mask.
    Prune(CommonArgs),
    /// Remove masked filters and check equivalence; writes compact.ckpt and a report.
    Rewrite(CommonArgs),
    /// Train the rewritten network further; writes finetuned.ckpt.
    Finetune(CommonArgs),
    /// Top-1 accuracy of a checkpoint on the test split.
    Eval(CommonArgs),
    /// FLOPs and parameter report of a checkpoint, optionally with timing.
    Analyze(CommonArgs),
}

fn run(cli: Cli) -> prunenet::Result<()> {
    let (stage, args) = match &cli.command {
        Command::Pretrain(a) => (Stage::Pretrain, a),
        Command::Prune(a) => (Stage::Prune, a),
        Command::Rewrite(a) => (Stage::Rewrite, a),
        Command::Finetune(a) => (Stage::Finetune, a),
        Command::Eval(a) => (Stage::Eval, a),
        Command::Analyze(a) => (Stage::Analyze, a),
    };
    let cfg = RunConfig::resolve(args, stage)?;
    let input: Option<PathBuf> = args.input.clone();
    let input = input.as_deref();
    match stage {
        Stage::Pretrain => commands::pretrain(&cfg).map(drop),
        Stage::Prune => commands::prune(&cfg, input).map(drop),
        Stage::Rewrite => commands::rewrite_cmd(&cfg, input).map(drop),
        Stage::Finetune => commands::finetune(&cfg, input).map(drop),
        Stage::Eval => commands::eval(&cfg, input).map(drop),
        Stage::Analyze => commands::analyze(&cfg, input).map(drop),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({"error": e.kind(), "message": e.to_string()});
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
