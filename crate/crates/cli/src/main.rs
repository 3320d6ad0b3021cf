use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "assertrag", version, about = "Retrieval-augmented assertion generation")]
struct Cli {
    /// Flat key = value config file (also read from ASSERTRAG_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    show_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

/// Corpus directory holding `<split>.source` / `<split>.target` files.
#[derive(Args, Debug, Clone)]
struct DataArgs {
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate and split a corpus (or generate a synthetic one) and print
    /// per-type assertion counts.
    Prepare {
        /// Focal-test file, one per line.
        #[arg(long, requires = "target", conflicts_with = "synthetic")]
        source: Option<PathBuf>,
        /// Assertion file, parallel to --source.
        #[arg(long)]
        target: Option<PathBuf>,
        /// Synthetic family: copy, paraphrase-retrieval or edit-one-arg.
        #[arg(long)]
        synthetic: Option<String>,
        /// Training pairs for --synthetic.
        #[arg(long, default_value_t = 512)]
        n: usize,
        /// Write train/valid/test splits here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a BPE tokenizer on the training split.
    TrainTokenizer {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the generator (and retriever, in joint mode).
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        /// Best checkpoint is written here; the epoch log next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the dense index over the training split.
    Index {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the top-k TAPs with scores and probabilities.
    Retrieve {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        /// Focal-test text; otherwise every query of --split.
        #[arg(long)]
        query: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Predict assertions for a split, with provenance.
    Generate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Predictions, one per line; provenance goes to `<out>.provenance.jsonl`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against a split's gold assertions.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        preds: PathBuf,
        /// Per-sample records, one JSON object per line.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value = "model")]
        name: String,
    },
    /// Train and test every retriever mode and print a comparison table.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        /// Comma-separated subset of modes; default all six.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correct-prediction overlap between systems.
    Overlap {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test")]
        split: String,
        /// NAME=PREDICTIONS; give at least two.
        #[arg(long = "system", value_name = "NAME=FILE", required = true)]
        systems: Vec<String>,
    },
}

fn pick(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = flag.or_else(|| fallback.clone()).with_context(|| format!("no {what} path given"))?;
    Ok(p)
}

fn existing(p: PathBuf) -> Result<PathBuf> {
    if !Path::new(&p).exists() {
        bail!("{} does not exist", p.display());
    }
    Ok(p)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    if cli.show_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let Some(command) = cli.command else {
        bail!("no command given; see --help");
    };
    let data = |d: DataArgs| pick(d.data, &cfg.data, "data").and_then(existing);
    let tok = |t: Option<PathBuf>| pick(t, &cfg.tokenizer, "tokenizer").and_then(existing);
    let ckpt = |c: Option<PathBuf>| pick(c, &cfg.checkpoint, "checkpoint").and_then(existing);
    match command {
        Command::Prepare { source, target, synthetic, n, out } => match (source, target, synthetic) {
            (Some(s), Some(t), None) => commands::prepare_files(&cfg, &existing(s)?, &existing(t)?, out.as_deref()),
            (None, None, Some(family)) => {
                let out = out.context("--synthetic needs --out")?;
                commands::prepare_synthetic(&cfg, &family, n, &out)
            }
            _ => bail!("give either --source and --target, or --synthetic"),
        },
        Command::TrainTokenizer { data: d, out } => {
            let out = pick(out, &cfg.tokenizer, "tokenizer output")?;
            commands::train_tokenizer(&cfg, &data(d)?, &out)
        }
        Command::Train { data: d, tokenizer, out } => {
            let out = pick(out, &cfg.checkpoint, "checkpoint output")?;
            commands::train(&cfg, &data(d)?, &tok(tokenizer)?, &out)
        }
        Command::Index { data: d, tokenizer, checkpoint, out } => {
            let out = pick(out, &cfg.index, "index output")?;
            commands::index(&data(d)?, &tok(tokenizer)?, &ckpt(checkpoint)?, &out)
        }
        Command::Retrieve { data: d, tokenizer, checkpoint, index, query, split } => {
            let index = index.or_else(|| cfg.index.clone());
            commands::retrieve(&cfg, &data(d)?, &tok(tokenizer)?, &ckpt(checkpoint)?, index.as_deref(), query, &split)
        }
        Command::Generate { data: d, tokenizer, checkpoint, index, split, out } => {
            let index = index.or_else(|| cfg.index.clone());
            commands::generate(&cfg, &data(d)?, &tok(tokenizer)?, &ckpt(checkpoint)?, index.as_deref(), &split, &out)
        }
        Command::Evaluate { data: d, split, preds, report, name } => {
            commands::evaluate(&data(d)?, &split, &existing(preds)?, report.as_deref(), &name)
        }
        Command::Ablate { data: d, tokenizer, modes, out } => {
            commands::ablate(&cfg, &data(d)?, &tok(tokenizer)?, &modes, out.as_deref())
        }
        Command::Overlap { data: d, split, systems } => commands::overlap(&data(d)?, &split, &systems),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
