//! `res2ctx` command-line tool.
//!
//! Exit codes: 0 success, 1 validation or input error, 2 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use res2ctx::blocks::Variant;

#[derive(Parser, Debug)]
#[command(name = "res2ctx", version, about = "Multi-scale context block speaker embeddings at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command; they override the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Output file (or directory for `train` and `synth`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the finite-difference gradient suites and print a TSV report.
    Gradcheck {
        /// Corrupt the backward rule of one op family (negative control).
        #[arg(long, hide = true)]
        fault: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Print the learnable parameter count (classifier excluded).
    Paramcount {
        #[command(flatten)]
        common: Common,
    },
    /// Train on a manifest; writes model.ckpt, train_log.tsv and run.cfg.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write an embedding table for every item of a manifest.
    Embed {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Cosine-score a trial list, optionally with AS-norm.
    Score {
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        trials: Option<PathBuf>,
        #[arg(long)]
        asnorm: bool,
        /// Cohort embedding table for AS-norm.
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        top_k: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// EER and minDCF of a score file against a trial list.
    Eval {
        #[arg(long)]
        trials: Option<PathBuf>,
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Also write the DET table here.
        #[arg(long)]
        det: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic corpus with train/test manifests and a trial list.
    Synth {
        #[arg(long, default_value_t = 20)]
        speakers: usize,
        #[arg(long, default_value_t = 50)]
        utts: usize,
        /// Utterances per speaker kept out of the training manifest.
        #[arg(long, default_value_t = 10)]
        held_out: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Print the effective configuration.
    Config {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn run(cmd: Command) -> res2ctx::Result<ExitCode> {
    use commands as c;
    match cmd {
        Command::Gradcheck { fault, common } => c::gradcheck(&common, fault.as_deref()),
        Command::Paramcount { common } => c::paramcount(&common),
        Command::Train { manifest, common } => c::train(&common, manifest),
        Command::Embed {
            manifest,
            checkpoint,
            common,
        } => c::embed(&common, manifest, checkpoint),
        Command::Score {
            embeddings,
            trials,
            asnorm,
            cohort,
            top_k,
            common,
        } => c::score(&common, embeddings, trials, asnorm, cohort, top_k),
        Command::Eval {
            trials,
            scores,
            det,
            common,
        } => c::eval(&common, trials, scores, det),
        Command::Synth {
            speakers,
            utts,
            held_out,
            common,
        } => c::synth(&common, speakers, utts, held_out),
        Command::Config { common } => c::show_config(&common),
    }
}
