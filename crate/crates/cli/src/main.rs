//! `xadapter`: banks, base models, adapter training, prompting and timing.
//!
//! Every command prints JSON lines on stdout; diagnostics go to stderr.
//! Exit codes: 0 success, 2 configuration or contract error, 3 I/O error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Preset;

#[derive(Parser)]
#[command(
    name = "xadapter",
    version,
    about = "Cross-attention adapters over a frozen toy encoder"
)]
struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build, query or augment a feature bank.
    #[command(subcommand)]
    Bank(BankOp),
    /// Train a base model from scratch on the config's corpus.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train adapters on the corpus with the base frozen.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        /// Pretrain a base model first when the base checkpoint is missing.
        #[arg(long)]
        pretrain_toy: bool,
    },
    /// Zero-shot label prediction for one item or a file of items.
    Reason {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, conflicts_with = "items")]
        item: Option<String>,
        /// One item per line, optionally followed by a tab and its gold label.
        #[arg(long, required_unless_present = "item")]
        items: Option<PathBuf>,
    },
    /// Time the plain base forward against the adapter path.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        n: usize,
    },
    /// Parameter accounting for a base model and its adapters.
    Params {
        #[arg(long, required_unless_present = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_enum, conflicts_with = "config")]
        preset: Option<PresetArg>,
        /// Vocabulary size for the desk preset.
        #[arg(long, default_value_t = 2000)]
        vocab: usize,
        /// Adapter count; defaults to the config's positions, or 1.
        #[arg(long)]
        adapters: Option<usize>,
    },
    /// Write the synthetic class task (base model, bank, corpus, items,
    /// prompts, labels, config) to a directory.
    Planted {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum BankOp {
    /// From CSV rows `id,v1,v2,...`.
    Build {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-k rows by cosine similarity.
    Query {
        #[arg(long)]
        bank: PathBuf,
        /// Comma-separated query vector.
        #[arg(long, allow_hyphen_values = true, required_unless_present = "text")]
        vector: Option<String>,
        /// Query text, embedded with the stub provider.
        #[arg(long, conflicts_with = "vector")]
        text: Option<String>,
        #[arg(long, default_value_t = 0)]
        stub_seed: u64,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Append one noisy copy of every row.
    Augment {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum PresetArg {
    Desk,
    Reference,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Reference => Preset::Reference,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();

    let result = match cli.command {
        Command::Bank(BankOp::Build { csv, out }) => commands::bank_build(&csv, &out),
        Command::Bank(BankOp::Query {
            bank,
            vector,
            text,
            stub_seed,
            k,
        }) => commands::bank_query(&bank, vector.as_deref(), text.as_deref(), stub_seed, k),
        Command::Bank(BankOp::Augment {
            bank,
            out,
            sigma,
            seed,
        }) => commands::bank_augment(&bank, &out, sigma, seed),
        Command::Pretrain { config } => commands::pretrain(&config),
        Command::Adapt {
            config,
            pretrain_toy,
        } => commands::adapt(&config, pretrain_toy),
        Command::Reason {
            config,
            item,
            items,
        } => commands::reason(&config, item.as_deref(), items.as_deref()),
        Command::Bench { config, n } => commands::bench(&config, n),
        Command::Params {
            config,
            preset,
            vocab,
            adapters,
        } => commands::params(config.as_deref(), preset.map(Preset::from), vocab, adapters),
        Command::Planted { out, seed } => commands::planted(&out, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
