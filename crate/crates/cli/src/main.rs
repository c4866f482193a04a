mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use posealign_core::data::Pairing;
use posealign_core::pipeline::{AdaptMode, LifterUpdate};

#[derive(Parser)]
#[command(name = "posealign", version, about = "Cross-domain 2D-to-3D pose lifting")]
struct Cli {
    /// Skeleton definition (one JSON line); defaults to the built-in 16-joint body.
    #[arg(long, global = true)]
    skeleton: Option<PathBuf>,

    /// Run on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic source, target and target ground-truth datasets.
    Synth(SynthArgs),
    /// Supervised training of the lifting network on source pairs.
    Pretrain(PretrainArgs),
    /// Adapt a pretrained lifter to an unlabelled target set.
    Adapt(AdaptArgs),
    /// Score a lifter (or stored predictions) against target ground truth.
    Eval(EvalArgs),
    /// Per-pair root positions from global position alignment.
    Gpa(GpaArgs),
    /// Project 3D poses through each record's camera at a fixed root.
    Project(ProjectArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON with optional `source` / `target` objects overriding the generator configs.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_source: Option<usize>,
    #[arg(long)]
    pub n_target: Option<usize>,
}

#[derive(Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a lifter checkpoint, starting at its recorded next epoch.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Epoch index at which training stops.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub iters_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Ground-truth sidecar for per-epoch evaluation; defaults to the target's
    /// `.gt.jsonl` sidecar when it exists.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub lifter: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub iters_per_epoch: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub generator_interval: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_lifter: Option<f64>,
    #[arg(long)]
    pub lr_generator: Option<f64>,
    #[arg(long)]
    pub lr_discriminator: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub canonical_depth: Option<f64>,
    #[arg(long, value_enum)]
    pub lifter_update: Option<LifterUpdateArg>,
    /// How each source pose is paired with a target pose per epoch.
    #[arg(long, value_enum)]
    pub pairing: Option<PairingArg>,
    #[arg(long)]
    pub pck_threshold: Option<f64>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Lifter checkpoint to run on the target 2D poses.
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub lifter: Option<PathBuf>,
    /// Precomputed 3D predictions (JSONL with `id` and `joints_3d`).
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = posealign_core::metrics::DEFAULT_PCK_THRESHOLD)]
    pub pck_threshold: f64,
}

#[derive(Args)]
pub struct GpaArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Pairing seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pairing epoch.
    #[arg(long, default_value_t = 0)]
    pub epoch: u64,
}

#[derive(Args)]
pub struct ProjectArgs {
    /// Records with root-relative `joints_3d`.
    #[arg(long)]
    pub input: PathBuf,
    /// Root translation `X,Y,Z` in millimetres.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
    pub root: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Use the constant-depth approximation.
    #[arg(long)]
    pub approx: bool,
}

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum ModeArg {
    Full,
    GpaOnly,
    LpaOnly,
    None,
}

impl From<ModeArg> for AdaptMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => AdaptMode::Full,
            ModeArg::GpaOnly => AdaptMode::GpaOnly,
            ModeArg::LpaOnly => AdaptMode::LpaOnly,
            ModeArg::None => AdaptMode::None,
        }
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum LifterUpdateArg {
    PerIteration,
    PerEpoch,
}

impl From<LifterUpdateArg> for LifterUpdate {
    fn from(m: LifterUpdateArg) -> Self {
        match m {
            LifterUpdateArg::PerIteration => LifterUpdate::PerIteration,
            LifterUpdateArg::PerEpoch => LifterUpdate::PerEpoch,
        }
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum PairingArg {
    Permutation,
    Replacement,
}

impl From<PairingArg> for Pairing {
    fn from(m: PairingArg) -> Self {
        match m {
            PairingArg::Permutation => Pairing::Permutation,
            PairingArg::Replacement => Pairing::Replacement,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = match commands::Context::new(cli.skeleton.as_deref(), cli.sequential) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Pretrain(a) => commands::pretrain(&ctx, a),
        Command::Adapt(a) => commands::adapt(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Gpa(a) => commands::gpa(&ctx, a),
        Command::Project(a) => commands::project(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
