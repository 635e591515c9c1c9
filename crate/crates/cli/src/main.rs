//! Experiment runner for architecture-vulnerability search.
//!
//! Subcommands cover the whole pipeline: sampling and scoring candidate
//! cells, evolution search, the training protocols, metric evaluation, the
//! analysis studies, and plot emission. Every run writes its effective
//! configuration next to its outputs, and identical (config, seed) pairs
//! reproduce byte-identical CSV outputs.

mod commands;
mod config;
mod plot;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "archvuln",
    about = "Search cell architectures for exploitable backdoor vulnerability and verify them by training",
    version
)]
struct Cli {
    /// Configuration file of dotted keys (defaults apply when absent).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set train.epochs=10 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    /// Global seed (shorthand for --set seed=N).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker bound for study rows (shorthand for --set workers=K).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "runs/out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw random architectures and print their canonical strings.
    Sample {
        /// How many to draw.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Score one architecture without training.
    Score {
        /// Canonical architecture string.
        #[arg(long)]
        arch: String,
    },
    /// Aging-evolution search driven by the training-free score.
    Search,
    /// Train a model on clean data.
    TrainClean {
        /// Canonical architecture string.
        #[arg(long, conflicts_with = "baseline")]
        arch: Option<String>,
        /// Use the residual comparison network instead of a cell arch.
        #[arg(long)]
        baseline: bool,
    },
    /// Train the backdoor: generator against a frozen clean model, or the
    /// joint objective.
    TrainBackdoor {
        /// Canonical architecture string.
        #[arg(long)]
        arch: Option<String>,
        /// frozen: clean-train then fit the generator; joint: train both.
        #[arg(long, default_value = "frozen")]
        mode: String,
        /// Reuse an existing clean model checkpoint (frozen mode).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Fine-tune a trained model on clean or poisoned data.
    Finetune {
        /// Model checkpoint to continue from.
        #[arg(long)]
        model: PathBuf,
        /// Generator checkpoint (enables ASR tracking and poisoning).
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Poisoning ratios to sweep, e.g. 0,0.001,0.01.
        #[arg(long, value_name = "RATIOS")]
        poison_grid: Option<String>,
    },
    /// Re-initialize and re-train an architecture from scratch, then
    /// measure it against a fixed generator.
    Retrain {
        /// Canonical architecture string.
        #[arg(long)]
        arch: String,
        /// Fixed generator checkpoint.
        #[arg(long)]
        generator: PathBuf,
        /// Seed of the fresh initialization.
        #[arg(long)]
        retrain_seed: Option<u64>,
    },
    /// Measure ACC (and ASR when a generator is given) on the test split.
    Eval {
        /// Model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Generator checkpoint.
        #[arg(long)]
        generator: Option<PathBuf>,
    },
    /// Score-versus-vulnerability correlation over random architectures.
    Correlate {
        /// Number of random architectures (config `study.num_archs`).
        #[arg(long)]
        archs: Option<usize>,
    },
    /// Evaluate an operator grid around a base architecture.
    Enumerate {
        /// Base architecture string.
        #[arg(long)]
        base: String,
        /// Comma-separated free edge indices (0..5).
        #[arg(long)]
        edges: String,
        /// Comma-separated operator tokens to place on those edges.
        #[arg(long)]
        ops: String,
    },
    /// 25-point landscape slice over two edges.
    Landscape {
        /// Base architecture string.
        #[arg(long)]
        base: String,
        /// Exactly two comma-separated edge indices.
        #[arg(long)]
        edges: String,
    },
    /// Render plots from a study table CSV.
    Plot {
        /// Study table written by correlate/enumerate/landscape/finetune.
        #[arg(long)]
        table: PathBuf,
        /// Output file stem.
        #[arg(long, default_value = "plot")]
        stem: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::CliError::Usage(e)) => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        Err(commands::CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), commands::CliError> {
    use commands::CliError;

    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(anyhow::anyhow!("{}: {e}", path.display())))?;
            config::ExperimentConfig::from_text(&text).map_err(CliError::Usage)?
        }
        None => config::ExperimentConfig::default(),
    };
    for assignment in &cli.sets {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Usage(anyhow::anyhow!("--set wants KEY=VALUE, got {assignment:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(CliError::Usage)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }

    std::fs::create_dir_all(&cli.out)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!("{}: {e}", cli.out.display())))?;
    std::fs::write(cli.out.join("effective.conf"), cfg.render())
        .map_err(|e| CliError::Runtime(e.into()))?;

    let ctx = commands::Context { cfg, out: cli.out };
    match cli.command {
        Command::Sample { count } => commands::sample(&ctx, count),
        Command::Score { arch } => commands::score(&ctx, &arch),
        Command::Search => commands::search(&ctx),
        Command::TrainClean { arch, baseline } => commands::train_clean(&ctx, arch.as_deref(), baseline),
        Command::TrainBackdoor { arch, mode, model } => {
            commands::train_backdoor(&ctx, arch.as_deref(), &mode, model.as_deref())
        }
        Command::Finetune { model, generator, poison_grid } => {
            commands::finetune(&ctx, &model, generator.as_deref(), poison_grid.as_deref())
        }
        Command::Retrain { arch, generator, retrain_seed } => {
            commands::retrain(&ctx, &arch, &generator, retrain_seed)
        }
        Command::Eval { model, generator } => commands::eval(&ctx, &model, generator.as_deref()),
        Command::Correlate { archs } => commands::correlate(&ctx, archs),
        Command::Enumerate { base, edges, ops } => commands::enumerate(&ctx, &base, &edges, &ops),
        Command::Landscape { base, edges } => commands::landscape(&ctx, &base, &edges),
        Command::Plot { table, stem } => commands::plot_cmd(&ctx, &table, &stem),
    }
}
