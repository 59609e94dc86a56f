//! `dequmx` command-line tool.
//!
//! Exit codes: 0 success, 1 usage, 2 numeric abort, 3 artifact mismatch,
//! 4 property failure.

mod config;
mod count;
mod gradcheck;
mod separate;
mod synth;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// A failed command with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    pub fn mismatch(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }

    pub fn property(message: impl Into<String>) -> Self {
        Self {
            code: 4,
            message: message.into(),
        }
    }
}

impl From<dequmx::Error> for Failure {
    fn from(e: dequmx::Error) -> Self {
        use dequmx::Error as E;
        let code = match &e {
            E::NanLoss { .. } | E::NonFinite { .. } | E::Diverged { .. } | E::LinearSolveNotConverged { .. } => 2,
            E::SpecMismatch(_) | E::Checkpoint { .. } | E::UnsupportedVersion(_) | E::Wav { .. } => 3,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

pub type CmdResult = Result<(), Failure>;

#[derive(Parser, Debug)]
#[command(name = "dequmx", version, about = "Deep-equilibrium music source separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one target network.
    Train(TrainArgs),
    /// Separate a mixture with trained checkpoints.
    Separate(SeparateArgs),
    /// Print parameter and MAC counts.
    Count(CountArgs),
    /// Train and score weight-tied models over a list of unroll depths.
    Sweep(SweepArgs),
    /// Run the equilibrium-gradient property suites.
    Gradcheck(GradcheckArgs),
    /// Write synthetic tone-plus-noise scenes as WAV files.
    Synth(SynthArgs),
}

/// Options shared by every command.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Plain-text `key = value` config file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub variant: Option<String>,
    /// `toy` or `full` model dimensions.
    #[arg(long)]
    pub scale: Option<String>,
    /// Backward pass of the equilibrium stage: `jfb` or `implicit`.
    #[arg(long)]
    pub backward: Option<String>,
    /// Unroll depth of weight-tied pretraining.
    #[arg(long = "pretrain-l")]
    pub pretrain_l: Option<usize>,
    #[arg(long = "pretrain-epochs")]
    pub pretrain_epochs: Option<usize>,
    /// Solver budget of the equilibrium stage.
    #[arg(long)]
    pub lmax: Option<usize>,
    /// Unroll depth of wt_umx.
    #[arg(long)]
    pub unroll: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub target: Option<String>,
    /// Dataset directory with `train/` and `valid/` scene folders.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Train on generated tone-plus-noise scenes.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long = "train-scenes")]
    pub train_scenes: Option<usize>,
    #[arg(long = "valid-scenes")]
    pub valid_scenes: Option<usize>,
    /// Output directory for the log and checkpoints.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SeparateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trained checkpoint, one per target (repeatable).
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    /// Mixture WAV.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the masked estimates (default when `--mwf` is absent).
    #[arg(long = "mask-only")]
    pub mask_only: bool,
    /// Write Wiener-filtered estimates.
    #[arg(long)]
    pub mwf: bool,
    /// Replace every network by one emitting a unit mask.
    #[arg(long = "identity-mask")]
    pub identity_mask: bool,
    /// Directory with reference `<target>.wav` files for SDR reporting.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CountArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub seconds: Option<f64>,
    /// Core evaluations: unroll depth of wt_umx, solver budget of deq_umx.
    #[arg(long)]
    pub unroll: Option<usize>,
    /// `full` (default) or `toy` dimensions.
    #[arg(long)]
    pub scale: Option<String>,
    /// Print every variant next to the published figures.
    #[arg(long)]
    pub table1: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated unroll depths.
    #[arg(long = "l-values")]
    pub l_values: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "train-scenes")]
    pub train_scenes: Option<usize>,
    #[arg(long = "valid-scenes")]
    pub valid_scenes: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// `all`, `equilibrium`, `implicit`, `jfb` or `broyden`.
    #[arg(long)]
    pub mode: Option<String>,
    /// With `--mode implicit`, check against a dense solve at this width.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Instances per suite (defaults to each suite's own count).
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Negate the right-hand side of the adjoint solve.
    #[arg(long = "inject-sign-flip")]
    pub inject_sign_flip: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub seconds: Option<f64>,
    /// Scene description file; replaces the random toy scenes.
    #[arg(long)]
    pub scene: Option<PathBuf>,
}

/// Collect `(key, value)` pairs for the flags that were given.
#[macro_export]
macro_rules! flag_pairs {
    ($common:expr; $($key:literal => $val:expr),* $(,)?) => {{
        let mut v: Vec<(String, String)> = $crate::config::RunConfig::split_sets(&$common.sets)?;
        $(
            if let Some(x) = $val {
                v.push(($key.to_string(), x.to_string()));
            }
        )*
        v
    }};
}

/// Print the effective configuration to stderr.
pub fn echo(command: &str, cfg: &config::RunConfig) {
    eprintln!("# dequmx {command}: effective configuration");
    eprint!("{}", cfg.echo());
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => train::run(a),
        Command::Separate(a) => separate::run(a),
        Command::Count(a) => count::run(a),
        Command::Sweep(a) => train::sweep(a),
        Command::Gradcheck(a) => gradcheck::run(a),
        Command::Synth(a) => synth::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
