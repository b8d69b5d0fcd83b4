//! Command-line front end: argument parsing, configuration layering and the
//! mapping from failures to exit codes.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::autodiff::TensorError;
use crate::data::DataError;
use crate::distillation::{DistillError, TrainingPhase};
use crate::metrics::MetricError;
use crate::model::CheckpointError;
use crate::tokenizer::TokenizerError;

pub use config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Config,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorKind::Usage | ErrorKind::Config => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Numeric => "numeric",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Usage, message)
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Data, message)
    }
}

/// `error: <kind>: <message>` on one line.
impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let one_line = self.message.replace('\n', " ");
        write!(f, "error: {}: {}", self.kind.name(), one_line)
    }
}

impl std::error::Error for CliError {}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        let kind = match e {
            TensorError::NonFinite { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Config,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        let kind = match e {
            TokenizerError::VocabTooSmall { .. } | TokenizerError::Layout(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Tensor(t) => t.into(),
            other => CliError::data(other.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        let kind = match e {
            MetricError::BadWeights(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<DistillError> for CliError {
    fn from(e: DistillError) -> Self {
        if e.is_numeric() {
            return CliError::new(ErrorKind::Numeric, e.to_string());
        }
        match e {
            DistillError::Tensor(t) => t.into(),
            DistillError::Tokenizer(t) => t.into(),
            DistillError::WrongPhase(_) | DistillError::TeacherNotFrozen(_) => CliError::usage(e.to_string()),
            DistillError::EmptyDataset(_) | DistillError::BadTarget(_) => CliError::data(e.to_string()),
            other => CliError::config(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "discorev", version, about = "Cross-task distillation for code review models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags accepted by every command. Flags override configuration files.
#[derive(Debug, Clone, Default, Args)]
pub struct SharedArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "NAME")]
    pub phase: Option<TrainingPhase>,
    /// Use the embedding-aligned comment phase.
    #[arg(long)]
    pub aligned: bool,
    /// Start joint training from a randomly initialized teacher.
    #[arg(long)]
    pub fresh_teacher: bool,
    /// Also print the teacher's refined code when generating.
    #[arg(long)]
    pub refine: bool,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
    /// Output directory: the data directory for `synth-data`, the run
    /// directory otherwise.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Configuration override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the subword vocabulary on the data directory's corpus.
    TrainTokenizer(SharedArgs),
    /// Fine-tune a teacher on its own task.
    PreFinetune(SharedArgs),
    /// Train a student with feedback from a teacher.
    TrainJoint(SharedArgs),
    /// Score trained checkpoints on a data split.
    Evaluate(SharedArgs),
    /// Generate a review for one piece of code.
    Generate {
        #[command(flatten)]
        shared: SharedArgs,
        /// Code to review.
        #[arg(long)]
        input: String,
    },
    /// Write a synthetic corpus.
    SynthData(SharedArgs),
    /// Score `{"candidate","reference"}` JSONL with BLEU-4 and CodeBLEU.
    Score {
        #[command(flatten)]
        shared: SharedArgs,
        /// JSONL file to score.
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutTarget {
    DataDir,
    RunDir,
}

/// Defaults, then the file, then `--set`, then dedicated flags.
pub fn resolve_config(args: &SharedArgs, target: OutTarget) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_file(path).map_err(CliError::config)?;
    }
    for kv in &args.overrides {
        cfg.apply_override(kv).map_err(CliError::config)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(phase) = args.phase {
        cfg.phase = Some(phase);
    }
    if args.aligned {
        cfg.aligned = true;
    }
    if args.fresh_teacher {
        cfg.fresh_teacher = true;
    }
    if let Some(out) = &args.out {
        match target {
            OutTarget::DataDir => cfg.data_dir = out.clone(),
            OutTarget::RunDir => cfg.run_dir = out.clone(),
        }
    }
    cfg.split.seed = cfg.seed;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::TrainTokenizer(a) => commands::train_tokenizer(&resolve_config(&a, OutTarget::RunDir)?),
        Command::PreFinetune(a) => commands::pre_finetune(&resolve_config(&a, OutTarget::RunDir)?),
        Command::TrainJoint(a) => commands::train_joint(&resolve_config(&a, OutTarget::RunDir)?),
        Command::Evaluate(a) => commands::evaluate(&resolve_config(&a, OutTarget::RunDir)?),
        Command::Generate { shared, input } => {
            commands::generate(&resolve_config(&shared, OutTarget::RunDir)?, &input, shared.refine)
        }
        Command::SynthData(a) => commands::synth_data(&resolve_config(&a, OutTarget::DataDir)?, a.force),
        Command::Score { shared, input } => {
            resolve_config(&shared, OutTarget::RunDir)?;
            commands::score(&input)
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", CliError::usage(first.trim_start_matches("error: ")));
            return ExitCode::from(ErrorKind::Usage.exit_code());
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("{e}");
            ExitCode::from(e.kind.exit_code())
        }
    }
}
