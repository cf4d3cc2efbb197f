use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gfca_cli::{cmd_export_embeddings, cmd_gradcheck, cmd_report, cmd_synth, cmd_train};

/// Generative few-shot cross-domain adaptation: feature-space GAN
/// augmentation, multi-kernel MMD alignment, and fair classification.
#[derive(Parser)]
#[command(name = "gfca", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write metrics, logs, and checkpoints.
    Train {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set mode=source-only` or
        /// `--set data.synthetic.seed=7`. Unprefixed keys address `[train]`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Generate the configured synthetic domain pair as feature files.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        /// One of: all, gan, adapt, mkmmd.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random instances per loss.
        #[arg(long, default_value_t = 25)]
        reps: usize,
        /// Corrupt one analytic entry to exercise the failure path.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Aggregate run directories into a per-mode, per-task table.
    Report {
        /// Run directories (searched recursively for metrics.json).
        dirs: Vec<PathBuf>,
        /// Output format: markdown or csv.
        #[arg(long, default_value = "markdown")]
        format: String,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-export encoder embeddings from a finished run directory.
    ExportEmbeddings {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, sets } => cmd_train(&config, &sets),
        Command::Synth { config, out_dir, sets } => cmd_synth(&config, &out_dir, &sets),
        Command::Gradcheck { scope, seed, reps, inject_fault } => {
            cmd_gradcheck(&scope, seed, reps, inject_fault)
        }
        Command::Report { dirs, format, out } => cmd_report(&dirs, &format, out.as_deref()),
        Command::ExportEmbeddings { run, out } => cmd_export_embeddings(&run, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
