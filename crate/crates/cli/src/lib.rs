//! Command-line front end for the `bipoint` library.
//!
//! [`run`] parses arguments and dispatches to a subcommand, so the binary and the
//! integration tests share one entry point.

mod commands;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::UsageError;

/// Exit code for success.
pub const EXIT_OK: i32 = 0;
/// Exit code for invalid flags or arguments.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for a numerical abort (non-finite loss, diverging paths).
pub const EXIT_NUMERIC: i32 = 3;
/// Exit code for file-system and format errors.
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "bipoint", version, about = "1-bit point-cloud classification toolkit")]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic primitive dataset (or convert an OFF directory) to PCD1 files.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a per-epoch report.
    ///
    /// Report columns: epoch,lr,task_loss,reconstruction_loss,train_acc,test_acc,
    /// mean_bimodality, then one bimodality_<i> column per binary layer.
    Train(TrainArgs),
    /// Evaluate a checkpoint; prints overall and per-class accuracy.
    ///
    /// Per-class columns: class,correct,total,accuracy.
    Eval(EvalArgs),
    /// Time packed XNOR/popcount against real matrix products.
    ///
    /// Columns: size,packed_ns,real_ns,speedup.
    Bench(BenchArgs),
    /// Dump one binary layer's latent weights and mixture parameters.
    ///
    /// Weight columns: channel,index,weight. Mixture columns:
    /// channel,mu0,mu1,var0,var1,beta0,beta1.
    Inspect(InspectArgs),
    /// Sign-flip rates of binary layers under Gaussian weight noise.
    ///
    /// Columns: layer,noise_std,sign_flip_rate, plus accuracy when --data is given.
    Robustness(RobustnessArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Comma-separated primitives: sphere, cube, cylinder, cone, torus.
    #[arg(long, default_value = "sphere,cube,cylinder,cone,torus")]
    pub classes: String,
    #[arg(long, default_value_t = 500)]
    pub per_class: usize,
    #[arg(long, default_value_t = 256)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Convert OFF meshes laid out as <dir>/<class>/{train,test}/*.off instead of generating.
    #[arg(long)]
    pub off_dir: Option<PathBuf>,
    /// Output directory; receives train.pcd and test.pcd.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Analytic,
    #[value(alias = "paper")]
    Published,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EmSignArg {
    Attract,
    Literal,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory with train.pcd (and optionally test.pcd).
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Report CSV; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Reconstruction-loss weight.
    #[arg(long, default_value_t = 1e-4)]
    pub lambda: f64,
    /// Mixture-attraction weight.
    #[arg(long, default_value_t = 1e-3)]
    pub tau: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub lr_floor: f64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = VariantArg::Analytic)]
    pub grad_variant: VariantArg,
    #[arg(long, value_enum, default_value_t = EmSignArg::Attract)]
    pub em_sign: EmSignArg,
    /// Single-threaded, bitwise-reproducible run.
    #[arg(long)]
    pub deterministic: bool,
    /// Train the real-valued control (no binarized layers).
    #[arg(long)]
    pub real: bool,
    /// Gaussian jitter on training clouds.
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
    /// Where to write the diagnostic dump on a numerical abort.
    #[arg(long)]
    pub dump: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PathArg {
    Packed,
    Simulated,
    /// Run both and require identical predictions.
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory (or a single .pcd file).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value_t = PathArg::Both)]
    pub path: PathArg,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated square sizes (rows = inner = output dimension).
    #[arg(long, default_value = "64,256,1024")]
    pub sizes: String,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Model layer index (must be a binary layer).
    #[arg(long)]
    pub layer: usize,
    /// Weight CSV destination.
    #[arg(long)]
    pub out: PathBuf,
    /// Mixture CSV destination; defaults to <out stem>_gmm.csv.
    #[arg(long)]
    pub gmm_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated noise standard deviations.
    #[arg(long, default_value = "0,0.01,0.02,0.05,0.1")]
    pub stds: String,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also report test accuracy with noisy weights on this dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command, returning the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let _ = env_logger::Builder::new().parse_filters(&cli.log).try_init();
    match commands::dispatch(&cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = commands::exit_code(&e);
            let _ = writeln!(err, "error: {e:#}");
            if code == EXIT_USAGE {
                let _ = writeln!(err, "see `bipoint --help` for usage");
            }
            code
        }
    }
}
