//! Command-line harness: training runs, evaluation reports, the PCA
//! comparison, memory-bank replays, the built-in verification suite,
//! structural-noise analysis, and synthetic data generation.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime/data error,
//! 3 verification failure.

mod commands;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Parser)]
#[command(
    name = "flowmem",
    version,
    about = "Invertible-flow codec: train, evaluate, compare against PCA, replay memory banks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by config-driven commands; flag values override the file,
/// which overrides the defaults.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the codec (predictor pretraining, then joint training) and
    /// write a checkpoint plus loss-history CSVs.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on its test split: per-sample metrics CSV/JSON
    /// and a mean summary.
    Eval {
        /// Checkpoint produced by `train` or `compare`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides the checkpoint's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the codec and fit PCA at equal m on the same split; emit a
    /// side-by-side table and sample reconstructions.
    Compare(ConfigArgs),
    /// Replay a bank script (`write <row|start..end>` / `read <row>`)
    /// against a trained checkpoint.
    Bank {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Script file, one operation per line; `#` starts a comment.
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in verification suite; exits 3 if any check fails.
    Verify(ConfigArgs),
    /// Per-sample noise decomposition for a checkpoint; with --sweep,
    /// retrain small models across depths and report final losses.
    Noise {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Retrain at depths N ∈ {2, 4, 6, 8} instead of analyzing the
        /// stored model.
        #[arg(long)]
        sweep: bool,
    },
    /// Generate a synthetic dataset and write it as CSV.
    GenData {
        /// Manifold kind: sinusoidal or blobs.
        #[arg(long, default_value = "sinusoidal")]
        kind: String,
        /// Sample count.
        #[arg(long, default_value_t = 2048)]
        n: usize,
        /// Feature count (blobs: must be a perfect square).
        #[arg(long, default_value_t = 64)]
        d: usize,
        /// Intrinsic manifold dimension.
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version surface as clap "errors"; real usage
            // errors exit 1 per the exit-code contract.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            e.print().ok();
            std::process::exit(code);
        }
    };

    let result: Result<(), CliError> = match cli.command {
        Command::Train(args) => commands::cmd_train(&args.config, args.seed, &args.out),
        Command::Eval { checkpoint, out } => commands::cmd_eval(&checkpoint, &out),
        Command::Compare(args) => commands::cmd_compare(&args.config, args.seed, &args.out),
        Command::Bank {
            checkpoint,
            script,
            out,
        } => commands::cmd_bank(&checkpoint, &script, &out),
        Command::Verify(args) => commands::cmd_verify(&args.config, args.seed, &args.out),
        Command::Noise {
            checkpoint,
            out,
            sweep,
        } => commands::cmd_noise(&checkpoint, &out, sweep),
        Command::GenData {
            kind,
            n,
            d,
            k,
            seed,
            out,
        } => commands::cmd_gen_data(&kind, n, d, k, seed, &out),
    };

    if let Err(e) = result {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}
