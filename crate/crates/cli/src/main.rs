//! `seaflow`: synthetic data generation, training, inference, evaluation and
//! ablation for the recurrent mixture-of-Laplace flow model.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seaflow::datagen::DataMode;
use seaflow::loss::LossKind;
use seaflow::trainer::Precision;
use seaflow::Error;

#[derive(Parser)]
#[command(name = "seaflow", version, about = "Recurrent all-pairs optical flow at desk scale")]
#[command(after_help = "Run directories default to <command>-<config hash> under $SEAFLOW_OUTPUT_ROOT (or ./runs).\n\
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical divergence, 1 other failure.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic frame pairs with ground-truth flow.
    Gen(GenArgs),
    /// Train a model, optionally resuming or warm-starting from a checkpoint.
    Train(TrainArgs),
    /// Estimate flow between two PPM frames.
    Infer(InferArgs),
    /// Score a checkpoint or a directory of predictions against a dataset.
    Eval(EvalArgs),
    /// Train every arm of an ablation and tabulate held-out metrics.
    Ablate(AblateArgs),
}

#[derive(Args)]
pub struct Common {
    /// TOML configuration; flags override its fields.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Run directory; must be empty or absent.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Number of frame pairs.
    #[arg(long)]
    count: Option<usize>,
    /// Dataset seed; sample `i` is reproducible from it alone.
    #[arg(long)]
    seed: Option<u64>,
    /// Scene family: `rigid` or `affine`.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<DataMode>,
    /// Frame height in pixels.
    #[arg(long)]
    height: Option<usize>,
    /// Frame width in pixels.
    #[arg(long)]
    width: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Total optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Seed for initialization and the training sample stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Frame pairs per step.
    #[arg(long)]
    batch: Option<usize>,
    /// Peak learning rate of the one-cycle schedule.
    #[arg(long)]
    lr: Option<f64>,
    /// Loss: `mol`, `naive_laplace`, `naive_mol`, `l1` or `mog`.
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
    /// Scalar type: `f32` or `f64`.
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    /// Continue the run in `--out` from its checkpoint.
    #[arg(long, requires = "out", conflicts_with = "init_from")]
    resume: bool,
    /// Start from another run's weights with fresh optimizer state.
    #[arg(long, value_name = "CKPT")]
    init_from: Option<PathBuf>,
    /// Halt after this many completed steps, leaving a resumable checkpoint.
    #[arg(long, value_name = "STEP")]
    stop_after: Option<usize>,
}

#[derive(Args)]
pub struct InferArgs {
    #[command(flatten)]
    common: Common,
    /// Training checkpoint to load.
    #[arg(long, value_name = "CKPT")]
    ckpt: Option<PathBuf>,
    /// First frame (PPM).
    image1: Option<PathBuf>,
    /// Second frame (PPM).
    image2: Option<PathBuf>,
    /// Refinement iterations; defaults to the model's inference count.
    #[arg(long)]
    iters: Option<usize>,
    /// Infer at 1/d scale and upsample the flow back.
    #[arg(long)]
    downsample: Option<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by `gen`.
    dataset: Option<PathBuf>,
    /// Training checkpoint to run on every sample.
    #[arg(long, value_name = "CKPT", conflicts_with = "pred")]
    ckpt: Option<PathBuf>,
    /// Directory of `<sample>_flow.flo` predictions to score instead of a model.
    #[arg(long, value_name = "DIR")]
    pred: Option<PathBuf>,
    /// Refinement iterations; repeat for one report row each.
    #[arg(long)]
    iters: Vec<usize>,
    /// Infer at 1/d scale and upsample the flow back.
    #[arg(long)]
    downsample: Option<usize>,
    /// Write a per-sample error map image.
    #[arg(long)]
    error_maps: bool,
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Seeds to repeat every arm with (comma separated).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Training steps of every arm.
    #[arg(long)]
    steps: Option<usize>,
}

fn parse_enum<E: serde::de::DeserializeOwned>(s: &str) -> Result<E, String> {
    E::deserialize(serde::de::value::StrDeserializer::<serde::de::value::Error>::new(s)).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<DataMode, String> {
    parse_enum(s)
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    parse_enum(s)
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    parse_enum(s)
}

/// Scriptable exit status of a failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Format { .. }
        | Error::Corrupt { .. }
        | Error::Io { .. }
        | Error::Shape(_)
        | Error::EmptyMask
        | Error::InvalidArgument(_) => 3,
        Error::Diverged { .. } | Error::NonFinite(_) => 4,
        Error::NoForward | Error::LoopOverrun { .. } => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_failure_class() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::EmptyMask), 3);
        let diverged = Error::Diverged {
            step: 1,
            loss: f64::NAN,
            initial: 1.0,
            streak: 100,
        };
        assert_eq!(exit_code(&diverged), 4);
        assert_eq!(exit_code(&Error::NonFinite("loss".into())), 4);
        assert_eq!(exit_code(&Error::NoForward), 1);
    }

    #[test]
    fn enum_flags_use_config_spelling() {
        assert_eq!(parse_mode("rigid"), Ok(DataMode::Rigid));
        assert_eq!(parse_precision("f64"), Ok(Precision::F64));
        assert!(parse_loss("bogus").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
