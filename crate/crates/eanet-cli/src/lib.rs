//! Command line front end: dataset synthesis, two-phase training, online
//! tracking, evaluation, curve plotting, and the aggregation ablation.
//!
//! Exit codes: 0 on success, 1 for usage problems (bad flags, unknown config
//! keys, no arguments at all), 2 for missing or malformed data.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

pub use commands::{run_ablation, AblationOutcome};
pub use config::{RunConfig, DATA_ROOT_ENV, KNOWN_KEYS};

/// Errors split by exit code: usage mistakes exit 1, data problems exit 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Data(msg) => write!(f, "error: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<eanet_core::Error> for CliError {
    fn from(e: eanet_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// key=value configuration file; '#' starts a comment
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable): --set track.top_k=3
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Dataset root; defaults to $EANET_DATA_ROOT
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Seed driving every random draw in the run
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; results/, reports/, curves/, checkpoints/ go below it
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Parser)]
#[command(
    name = "eanet",
    version,
    about = "Dual-modality visual tracker: synthesis, training, tracking, evaluation",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic paired-modality dataset in the RGBT234 layout
    Synth {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Phase 1: train one attribute branch and its scoring head
    #[command(name = "train-phase1")]
    TrainPhase1 {
        /// Attribute code: tc, iv, sv, occ, or fm
        #[arg(long)]
        attribute: String,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Phase 2: fuse five branch checkpoints, train aggregation + fresh head
    #[command(name = "train-phase2")]
    TrainPhase2 {
        /// Directory holding phase1_<code>.ckpt for all five attributes
        #[arg(long)]
        checkpoints: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the online tracker over a dataset and write result files
    Track {
        /// Model checkpoint; when omitted a seeded model is used
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Score result files against ground truth; write report table and curves
    Eval {
        /// Directory of <sequence>.txt result files
        #[arg(long)]
        results: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Draw precision and success curves for one or more result sets
    Plot {
        /// Labeled result directory (repeatable): --results NAME=DIR
        #[arg(long = "results", value_name = "NAME=DIR", required = true)]
        results: Vec<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Compare attention aggregation against the summation baseline
    Ablate {
        /// Checkpoint for the summation baseline; when omitted a seeded model
        #[arg(long)]
        checkpoint_sum: Option<PathBuf>,
        /// Checkpoint for the attention variant; when omitted a seeded model
        #[arg(long)]
        checkpoint_esk: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
}

/// Dispatch a parsed command.
pub fn run_command(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth { common } => commands::cmd_synth(common),
        Command::TrainPhase1 { attribute, common } => commands::cmd_train_phase1(common, attribute),
        Command::TrainPhase2 { checkpoints, common } => {
            commands::cmd_train_phase2(common, checkpoints)
        }
        Command::Track { checkpoint, common } => commands::cmd_track(common, checkpoint.as_deref()),
        Command::Eval { results, common } => commands::cmd_eval(common, results),
        Command::Plot { results, common } => commands::cmd_plot(common, results),
        Command::Ablate {
            checkpoint_sum,
            checkpoint_esk,
            common,
        } => commands::cmd_ablate(common, checkpoint_sum.as_deref(), checkpoint_esk.as_deref()),
    }
}

/// Parse `args` and run. Returns the process exit code: 0 on success, 1 for
/// usage problems (including a bare invocation with no arguments), 2 for
/// missing or malformed data. `--help` and `--version` exit 0.
pub fn run_from<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    match run_command(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("{err}");
            err.exit_code()
        }
    }
}
