//! `attnvtg` batch driver. Every command reads and writes plain files; no
//! model is ever called from here.
//!
//! Exit codes: 0 success, 1 internal error, 2 invalid or unreadable input or
//! unwritable output, 3 dump pairing error, 4 missing Stage-2 predictions,
//! 5 sample id mismatch while scoring, 6 malformed sweep or bad `k`.

mod commands;
mod output;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "attnvtg", version, about = "Attention-guided video temporal grounding, offline pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// Pipeline config (JSON, or TOML by extension).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Per-dataset overlay applied on top of the config.
    #[arg(long, global = true)]
    pub overlay: Option<PathBuf>,
    /// Output file (directory for `synth`). Defaults to stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for batch commands (0 = all cores).
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Stage-1 analysis of one dump pair or a whole synth-style corpus.
    Analyze(commands::AnalyzeArgs),
    /// Merge Stage-1 records with Stage-2 outputs into final predictions.
    Merge(commands::MergeArgs),
    /// R1@θ / mIoU of predictions against ground truth, or deltas between two summaries.
    Score(commands::ScoreArgs),
    /// Top-K heads from a knockout sweep.
    SelectHeads(commands::SelectHeadsArgs),
    /// Write a seeded synthetic corpus.
    Synth(commands::SynthArgs),
    /// Emit plot data (CSV) or a quick SVG.
    Plot(commands::PlotArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(a) => commands::analyze(&cli.global, a),
        Command::Merge(a) => commands::merge(&cli.global, a),
        Command::Score(a) => commands::score(&cli.global, a),
        Command::SelectHeads(a) => commands::select_heads(&cli.global, a),
        Command::Synth(a) => commands::synth(&cli.global, a),
        Command::Plot(a) => commands::plot(&cli.global, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.source);
            ExitCode::from(e.code)
        }
    }
}
