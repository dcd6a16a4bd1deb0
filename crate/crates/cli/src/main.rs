use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(name = "gmt", version, about = "Graph memory transformer tooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TokenizerKind {
    /// Raw bytes plus an end-of-text id.
    Byte,
    /// Vocabulary file given with --vocab.
    Plugin,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TemplateKind {
    Qa,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize a document directory into train/validation streams.
    Prepare {
        /// Directory of UTF-8 text files.
        #[arg(long, required_unless_present = "synthetic")]
        input: Option<PathBuf>,
        /// Generate this many bytes of synthetic English-like text instead.
        #[arg(long, conflicts_with = "input")]
        synthetic: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output prefix; writes PREFIX.train and PREFIX.val plus manifests.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "byte")]
        tokenizer: TokenizerKind,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 0.95)]
        split: f64,
        /// Treat blank-line separated blocks as separate documents.
        #[arg(long)]
        blank_line_docs: bool,
    },
    /// Train from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Stream prefix written by `prepare`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Validation loss and memory diagnostics of a checkpoint.
    Validate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        /// Disable write-back and usage updates during evaluation.
        #[arg(long)]
        frozen: bool,
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Multiple-choice accuracy on a JSON Lines item file.
    Score {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        items: PathBuf,
        #[arg(long, value_enum, default_value = "qa")]
        template: TemplateKind,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Keep write-back active while scoring.
        #[arg(long)]
        adaptive: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-token routing records of a text.
    Trace {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Slot utilization statistics.
    Stats {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transition rows of the most used slots as CSV.
    Edges {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 32)]
        top: usize,
        #[arg(long, default_value_t = 0)]
        block: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss with every displacement scaled by each alpha.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,2")]
        alphas: Vec<f64>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Finite-difference check of the full training objective.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Exact trainable parameter count.
    Paramcount {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    use commands::*;
    match command {
        Command::Prepare {
            input,
            synthetic,
            seed,
            out,
            tokenizer,
            vocab,
            split,
            blank_line_docs,
        } => prepare(PrepareArgs {
            input,
            synthetic,
            seed,
            out,
            tokenizer,
            vocab,
            split,
            blank_line_docs,
        }),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => train(&config, &data, &out, resume.as_deref()),
        Command::Validate {
            ckpt,
            stream,
            frozen,
            cap,
            batch,
        } => validate(&ckpt, &stream, frozen, cap, batch),
        Command::Score {
            ckpt,
            items,
            template,
            vocab,
            adaptive,
            out,
        } => score(
            &ckpt,
            &items,
            template,
            vocab.as_deref(),
            adaptive,
            out.as_deref(),
        ),
        Command::Trace {
            ckpt,
            text,
            out,
            vocab,
        } => trace(&ckpt, &text, &out, vocab.as_deref()),
        Command::Stats { ckpt, trace, out } => stats(&ckpt, trace.as_deref(), &out),
        Command::Edges {
            ckpt,
            top,
            block,
            out,
        } => edges(&ckpt, top, block, &out),
        Command::Sweep {
            ckpt,
            text,
            alphas,
            vocab,
        } => sweep(&ckpt, &text, &alphas, vocab.as_deref()),
        Command::Gradcheck {
            config,
            tolerance,
            step,
            seed,
        } => gradcheck(&config, tolerance, step, seed),
        Command::Paramcount { config, json } => paramcount(&config, json),
    }
}
