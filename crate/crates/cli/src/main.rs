mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ivio::eval::Alignment;

#[derive(Parser)]
#[command(
    name = "ivio",
    version,
    about = "Invariant MSCKF visual-inertial odometry with a learned IMU bias model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a trajectory spec.
    Simulate {
        /// TOML trajectory spec.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory (EuRoC layout plus tracks, true bias and camera).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the bias network on ground-truth datasets.
    Train {
        /// Training dataset directories.
        #[arg(long = "train", required = true, num_args = 1..)]
        train: Vec<PathBuf>,
        /// Validation dataset directories; training loss selects the best epoch when empty.
        #[arg(long = "validation", num_args = 1..)]
        validation: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from this checkpoint instead of a fresh network.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss log; defaults to the checkpoint path with extension `.loss.tsv`.
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Run the filter over a dataset.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        predictor: PredictorArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output TUM trajectory.
        #[arg(long)]
        out: PathBuf,
        /// Diagnostics log; defaults to the output path with extension `.diag.txt`.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Compare an estimated trajectory with ground truth.
    Eval {
        /// Estimated TUM trajectory.
        #[arg(long)]
        est: PathBuf,
        /// Ground truth: a TUM file or a EuRoC-layout dataset directory.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "posyaw")]
        alignment: Alignment,
        /// Length the relative-error fractions refer to, meters; defaults to
        /// the ground-truth traveled distance.
        #[arg(long)]
        reference_length: Option<f64>,
        /// Also write the tab-separated metric records here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare runs with and without camera frames over blackout windows.
    Blackout {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        predictor: PredictorArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Blackout start, seconds after the first IMU sample.
        #[arg(long)]
        start: f64,
        /// Blackout durations, seconds.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        durations: Vec<f64>,
        /// Output table.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct PredictorArgs {
    /// Bias network checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Integrate raw measurements without bias correction.
    #[arg(long)]
    zero_bias: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Ivio(#[from] ivio::Error),
}

impl CliError {
    /// 3 configuration, 4 data, 5 numeric, 6 training divergence (2 is
    /// reserved for usage errors).
    fn exit_code(&self) -> u8 {
        use ivio::Error as E;
        match self {
            CliError::Config(_) | CliError::Ivio(E::InvalidArgument(_)) => 3,
            CliError::Ivio(
                E::Io { .. } | E::Parse { .. } | E::Data(_) | E::InsufficientData(_),
            ) => 4,
            CliError::Ivio(E::TrainingDiverged { .. }) => 6,
            CliError::Ivio(
                E::StateCorruption(_)
                | E::NumericDomain { .. }
                | E::Numeric(_)
                | E::DegenerateGeometry(_)
                | E::Convergence(_)
                | E::Cheirality(_),
            ) => 5,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { spec, out } => commands::simulate(&spec, &out),
        Command::Train {
            train,
            validation,
            config,
            resume,
            out,
            loss_log,
        } => commands::train(
            &train,
            &validation,
            config.as_deref(),
            resume.as_deref(),
            &out,
            loss_log.as_deref(),
        ),
        Command::Run {
            dataset,
            predictor,
            config,
            out,
            diagnostics,
        } => commands::run(
            &dataset,
            predictor.checkpoint.as_deref(),
            config.as_deref(),
            &out,
            diagnostics.as_deref(),
        ),
        Command::Eval {
            est,
            gt,
            alignment,
            reference_length,
            out,
        } => commands::eval(&est, &gt, alignment, reference_length, out.as_deref()),
        Command::Blackout {
            dataset,
            predictor,
            config,
            start,
            durations,
            out,
        } => commands::blackout(
            &dataset,
            predictor.checkpoint.as_deref(),
            config.as_deref(),
            start,
            &durations,
            &out,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
