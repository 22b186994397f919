use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};

mod commands;
mod output;

/// Continual sequential recommendation over blocks of interactions.
#[derive(Debug, Parser)]
#[command(name = "streamrec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split an interaction CSV (user,item,timestamp) into data blocks.
    #[command(group(ArgGroup::new("split").required(true).args(["blocks", "boundaries"])))]
    Prepare {
        /// Interaction log with columns user,item,timestamp.
        #[arg(long)]
        input: PathBuf,
        /// Number of equal-width time windows.
        #[arg(long)]
        blocks: Option<usize>,
        /// Strictly increasing timestamps where a new block starts.
        #[arg(long, value_delimiter = ',')]
        boundaries: Option<Vec<u64>>,
        /// Output directory for the manifest and block files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic drifting stream as data blocks.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// TOML file with synthetic stream settings; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        blocks: Option<usize>,
        /// Probability that a returning user's interest drifts.
        #[arg(long)]
        drift: Option<f64>,
        /// New users per block as a fraction of the initial users.
        #[arg(long)]
        new_user_rate: Option<f64>,
        /// Length multiplier of the always-active user 0.
        #[arg(long)]
        hyperactive_factor: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train block by block, writing checkpoints, logs and metrics.
    Train {
        /// Directory written by `prepare` or `generate`.
        #[arg(long)]
        data: PathBuf,
        /// TOML training config; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// fine_tune or full_batch; overrides the config.
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a state checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write per-block metrics as a CSV table.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Evaluate a state checkpoint on the blocks it has seen.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also report attention output norms, treating these users as active.
        #[arg(long, value_delimiter = ',')]
        probe_active: Option<Vec<usize>>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the stream once per component combination.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// e.g. `csn,pka`, `pka:K=0,1,3,5,10`, `drop-one`; `;` crosses factors.
        #[arg(long)]
        toggles: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Time attention mechanisms over a sequence-length sweep.
    Bench {
        /// Any of self_attention, linear, csa.
        #[arg(long, value_delimiter = ',', default_value = "self_attention,linear,csa")]
        mechanisms: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096,8192")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        /// Also time forward plus backward.
        #[arg(long)]
        train_step: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Directory for line-delimited records and the run manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump pool keys, patterns and per-user selections of a checkpoint.
    ExportPools {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output JSON file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
