//! Command-line driver: data generation, training of the full method
//! roster, embedding export, retrieval evaluation, compatibility checks,
//! experiment drivers, and the self-check suite.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime/numeric error,
//! 3 self-check failure.

mod commands;
mod config;
mod selfcheck;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use bt2_core::analysis::AnalysisError;
use bt2_core::data::DataError;
use bt2_core::format::FormatError;
use bt2_core::model::ModelError;
use bt2_core::retrieval::EvalError;
use bt2_core::train::TrainError;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit code 1.
    Usage(String),
    /// Runtime or numeric failure; exit code 2.
    Runtime(String),
    /// The self-check suite found a failing property; exit code 3.
    SelfcheckFailed,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
            CliError::SelfcheckFailed => write!(f, "self-check failed"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::SelfcheckFailed => 3,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Usage(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(m) => CliError::Usage(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Config(m) => CliError::Usage(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => CliError::Usage(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "bt2",
    version,
    about = "Backward-compatible embedding training with basis-transformation blocks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset (train/val/train-old files)
    GenData(GenDataArgs),
    /// Train one method and write its checkpoint
    Train(TrainArgs),
    /// Embed a dataset with a trained checkpoint
    Embed(EmbedArgs),
    /// Evaluate a query store against a gallery store
    Eval(EvalArgs),
    /// Backward-compatibility and not-hurting verdicts
    CheckCompat(CheckCompatArgs),
    /// Sweep the number of extra dimensions
    AblateDims(AblateArgs),
    /// Chain of model updates, each compatible with the previous
    Series(SeriesArgs),
    /// Rejection-sample the compatibility trade-off bound
    VerifyLemma1(VerifyLemma1Args),
    /// Full pipeline per seed with mean/std aggregation
    Seeds(SeedsArgs),
    /// Run the invariant suite; nonzero exit on any failure
    Selfcheck(SelfcheckArgs),
}

/// Hyperparameters shared by train and the experiment drivers. Unset flags
/// fall back to the config file, then to defaults.
#[derive(Args, Clone, Default)]
pub struct HyperArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long = "c-scale")]
    c_scale: Option<f64>,
    #[arg(long = "cls-on-final")]
    cls_on_final: bool,
}

impl HyperArgs {
    pub fn apply(&self, cfg: &mut config::RunConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.lambda1 {
            cfg.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            cfg.lambda2 = v;
        }
        if let Some(v) = self.lambda3 {
            cfg.lambda3 = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.m {
            cfg.m = v;
        }
        if let Some(v) = self.n {
            cfg.n = v;
        }
        if let Some(v) = self.d {
            cfg.d = v;
        }
        if let Some(v) = self.c_scale {
            cfg.c_scale = v;
        }
        if self.cls_on_final {
            cfg.cls_on_final = true;
        }
    }
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long = "per-class", default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    #[arg(long = "old-fraction", default_value_t = 0.5)]
    old_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output prefix; writes <out>-train.dset, <out>-val.dset,
    /// <out>-train-old.dset
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Plain `key = value` config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "old-model")]
    old_model: Option<PathBuf>,
    #[arg(long = "new-independent")]
    new_independent: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
pub struct EmbedArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Model tag recorded in the store; defaults to the checkpoint file stem
    #[arg(long)]
    tag: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long, default_value = "cmc1,cmc5,map")]
    metrics: String,
    /// Keep a query's own gallery record in its candidate list
    #[arg(long = "no-self-exclude")]
    no_self_exclude: bool,
    /// Output prefix; writes <out>.jsonl and <out>.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct CheckCompatArgs {
    /// Old-model embeddings of the query set
    #[arg(long = "old-query")]
    old_query: PathBuf,
    /// New-model embeddings of the same query set (ids aligned)
    #[arg(long = "new-query")]
    new_query: PathBuf,
    /// Old-model gallery
    #[arg(long)]
    gallery: PathBuf,
    /// Independently trained new embeddings, enabling the not-hurting check
    #[arg(long = "new-independent")]
    new_independent: Option<PathBuf>,
    #[arg(long, default_value = "cmc1,cmc5,map")]
    metrics: String,
    /// Optional JSON verdict file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Comma-separated extra-dimension counts, e.g. 8,16,32
    #[arg(long)]
    dims: String,
    #[arg(long = "old-fraction", default_value_t = 0.5)]
    old_fraction: f64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
pub struct SeriesArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Comma-separated stage methods, e.g. bt2,bt2,bt2
    #[arg(long)]
    stages: String,
    /// Embedding size of the initial model
    #[arg(long = "base-dim", default_value_t = 16)]
    base_dim: usize,
    /// Extra dimensions added by each two-block stage
    #[arg(long, default_value_t = 4)]
    d: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
pub struct VerifyLemma1Args {
    #[arg(long, default_value_t = 0.05)]
    eps: f64,
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
pub struct SeedsArgs {
    /// Comma-separated training seeds for the compatibility methods
    #[arg(long, default_value = "1,2,3,4,5")]
    seeds: String,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long = "per-class", default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    #[arg(long = "data-seed", default_value_t = 0)]
    data_seed: u64,
    #[arg(long = "old-fraction", default_value_t = 0.5)]
    old_fraction: f64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
pub struct SelfcheckArgs {
    /// Test-only fault injection (skew-sign)
    #[arg(long = "inject-fault", hide = true)]
    inject_fault: Option<String>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(args) => commands::gen_data(&args),
        Command::Train(args) => commands::train(&args),
        Command::Embed(args) => commands::embed(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::CheckCompat(args) => commands::check_compat(&args),
        Command::AblateDims(args) => commands::ablate_dims(&args),
        Command::Series(args) => commands::series(&args),
        Command::VerifyLemma1(args) => commands::verify_lemma1(&args),
        Command::Seeds(args) => commands::seeds(&args),
        Command::Selfcheck(args) => {
            let fault = match args.inject_fault.as_deref() {
                None => selfcheck::Fault::None,
                Some("skew-sign") => selfcheck::Fault::SkewSign,
                Some(other) => {
                    return Err(CliError::Usage(format!("unknown fault '{other}'")))
                }
            };
            if selfcheck::run(fault) {
                Ok(())
            } else {
                Err(CliError::SelfcheckFailed)
            }
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version requests are not errors
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
