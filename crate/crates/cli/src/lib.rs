//! `seqfn` command line: corpus ingestion, pretraining, fine-tuning,
//! evaluation, and prediction over the core library.

pub mod commands;
pub mod config;
pub mod error;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use commands::{EvaluateArgs, FinetuneArgs, IngestArgs, PredictArgs, PretrainArgs};
use error::EXIT_USAGE;
use std::ffi::OsString;

#[derive(Parser)]
#[command(
    name = "seqfn",
    version,
    about = "Protein sequence-function modeling: state-space and CNN models, pretraining and fine-tuning"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a normalized FASTA corpus from PDB files or FASTA, with residue statistics
    Ingest(IngestArgs),
    /// Next-token pretraining on an unlabeled corpus
    Pretrain(PretrainArgs),
    /// Supervised fine-tuning for regression or classification
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint on one split of a labeled CSV
    Evaluate(EvaluateArgs),
    /// Score FASTA sequences with a fine-tuned checkpoint
    Predict(PredictArgs),
}

/// Parse and execute; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp
                    | ErrorKind::DisplayVersion
                    | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) =>
        {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{e}");
            return EXIT_USAGE;
        }
    };
    let result = match &cli.cmd {
        Cmd::Ingest(args) => commands::cmd_ingest(args),
        Cmd::Pretrain(args) => commands::cmd_pretrain(args),
        Cmd::Finetune(args) => commands::cmd_finetune(args),
        Cmd::Evaluate(args) => commands::cmd_evaluate(args),
        Cmd::Predict(args) => commands::cmd_predict(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
