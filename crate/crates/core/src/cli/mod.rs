//! The `cicd` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 backend or
//! protocol failure, 3 internal invariant violation.

mod commands;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::engine::{AlphaClip, AlphaMode, EngineConfig, EngineError};
use crate::exec::Execution;
use crate::experiment::ExperimentError;
use crate::protocol::client::Endpoint;
use crate::protocol::session::BackendError;
use crate::selector::SelectorError;
use crate::serde_ext::parse_ext_f64;
use crate::sim::calibrate::CalibrationError;
use crate::sim::world::WorldError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(m: impl Into<String>) -> Self {
        Self { code: 1, message: m.into() }
    }

    pub fn backend(m: impl Into<String>) -> Self {
        Self { code: 2, message: m.into() }
    }

    pub fn internal(m: impl Into<String>) -> Self {
        Self { code: 3, message: m.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_) => CliError::usage(e.to_string()),
            EngineError::Session { source: BackendError::NotFound(_) | BackendError::InvalidRequest(_), .. } => {
                CliError::usage(e.to_string())
            }
            EngineError::Session { .. } | EngineError::VocabMismatch { .. } | EngineError::ShapeMismatch { .. } => {
                CliError::backend(e.to_string())
            }
            EngineError::SessionMismatch(_) | EngineError::Logits(_) | EngineError::DegenerateDivergence => {
                CliError::internal(e.to_string())
            }
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Engine(e) => e.into(),
            ExperimentError::Config(_) | ExperimentError::Selector(_) => CliError::usage(e.to_string()),
            ExperimentError::Metrics(_) | ExperimentError::Logits(_) => CliError::internal(e.to_string()),
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::NotFound(_) | BackendError::InvalidRequest(_) => CliError::usage(e.to_string()),
            _ => CliError::backend(e.to_string()),
        }
    }
}

impl From<WorldError> for CliError {
    fn from(e: WorldError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<SelectorError> for CliError {
    fn from(e: SelectorError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<CalibrationError> for CliError {
    fn from(e: CalibrationError) -> Self {
        match e {
            CalibrationError::Experiment(e) => e.into(),
            other => CliError::usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::usage(format!("i/o error: {e}"))
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

/// `sim:<world.json>` runs the synthetic model in process; anything else is a
/// remote endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Sim(PathBuf),
    Remote(Endpoint),
}

impl FromStr for BackendSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.strip_prefix("sim:") {
            Some(path) if !path.is_empty() => Ok(BackendSpec::Sim(path.into())),
            Some(_) => Err("sim: backend needs a world file".into()),
            None => s.parse().map(BackendSpec::Remote),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContrastArg {
    Random,
    Retrieve(PathBuf),
    Image(String),
}

impl FromStr for ContrastArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "random" {
            Ok(ContrastArg::Random)
        } else if let Some(p) = s.strip_prefix("retrieve:") {
            if p.is_empty() {
                return Err("retrieve: needs an embedding file".into());
            }
            Ok(ContrastArg::Retrieve(p.into()))
        } else if s.is_empty() {
            Err("contrast must be random, retrieve:<file> or an image id".into())
        } else {
            Ok(ContrastArg::Image(s.to_owned()))
        }
    }
}

pub fn parse_gamma(s: &str) -> Result<f64, String> {
    parse_ext_f64(s).ok_or_else(|| format!("invalid gamma {s:?}; use a number, -inf or inf"))
}

#[derive(Debug, Parser)]
#[command(name = "cicd", version, about = "Cross-image contrastive decoding")]
pub struct Cli {
    /// Parallel or sequential execution of independent jobs.
    #[arg(long = "exec", global = true, default_value = "parallel")]
    pub execution: Execution,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EngineArgs {
    /// Gate threshold on log10 JSD; accepts -inf and inf.
    #[arg(long, default_value = "-4", allow_hyphen_values = true, value_parser = parse_gamma)]
    #[serde(with = "crate::serde_ext::ext_f64")]
    pub gamma: f64,
    /// Adaptive plausibility cutoff.
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    /// dynamic, fixed:<alpha> or off.
    #[arg(long, default_value = "dynamic")]
    pub alpha_mode: AlphaMode,
    /// Clip interval for the dynamic coefficient, as LOW,HIGH.
    #[arg(long, default_value = "1,3")]
    pub alpha_clip: AlphaClip,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Argmax instead of sampling.
    #[arg(long)]
    pub greedy: bool,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
}

impl EngineArgs {
    pub fn config(&self, seed: u64, full_trace: bool) -> EngineConfig {
        EngineConfig {
            gamma: self.gamma,
            beta: self.beta,
            alpha_mode: self.alpha_mode,
            alpha_clip: self.alpha_clip,
            temperature: self.temperature,
            greedy: self.greedy,
            max_len: self.max_len,
            seed,
            full_trace,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    /// sim:<world.json>, exec:<command>, tcp:<host:port> or unix:<path>.
    #[arg(long)]
    pub backend: BackendSpec,
    #[arg(long)]
    pub image: String,
    /// random, retrieve:<embeddings> or an image id.
    #[arg(long, default_value = "random")]
    pub contrast: ContrastArg,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[arg(long, env = "CICD_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Prompt tokens, as ids or vocabulary words separated by spaces.
    #[arg(long, default_value = "")]
    pub prompt: String,
    /// Store both logit vectors in every trace line.
    #[arg(long)]
    pub full_trace: bool,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub world: PathBuf,
    /// Use the first N images; all by default.
    #[arg(long)]
    pub images: Option<usize>,
    /// First seed; seeds are SEED..SEED+NUM_SEEDS.
    #[arg(long, env = "CICD_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub num_seeds: u64,
    /// random or retrieve:<embeddings>.
    #[arg(long, default_value = "random")]
    pub contrast: ContrastArg,
    #[arg(long, default_value = "")]
    pub prompt: String,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Comma-separated thresholds, -inf allowed.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        value_parser = parse_gamma,
        default_value = "-inf,-8,-6,-4,-2,-1"
    )]
    pub gammas: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    /// Cross-image consistency of a world's logits.
    #[arg(long, conflicts_with = "trace", required_unless_present = "trace")]
    pub world: Option<PathBuf>,
    /// Per-step log10 JSD series of a trace file.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub pairs: usize,
    #[arg(long, env = "CICD_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Default,
    Trap,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct WorldBuildArgs {
    #[arg(long, value_enum, default_value = "default")]
    pub preset: Preset,
    #[arg(long, env = "CICD_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub function_words: Option<usize>,
    #[arg(long)]
    pub objects: Option<usize>,
    #[arg(long)]
    pub objects_per_image: Option<usize>,
    #[arg(long)]
    pub cycles: Option<usize>,
    /// Function-slot bonus for mentioned objects present in the image.
    #[arg(long)]
    pub visual_leak: Option<f64>,
    /// Per-image noise on function-word logits.
    #[arg(long)]
    pub prior_jitter: Option<f64>,
    /// Fix the object visual weight instead of calibrating it.
    #[arg(long)]
    pub w_vis: Option<f64>,
    #[arg(long)]
    pub no_calibrate: bool,
    /// Trap preset: prior weight on object slots.
    #[arg(long, default_value_t = 4.0)]
    pub trap_w_lang: f64,
    /// Trap preset: visual weight on object slots.
    #[arg(long, default_value_t = 1.0)]
    pub trap_w_vis: f64,
    /// Trap preset: prior association of the trap pair.
    #[arg(long, default_value_t = 1.0)]
    pub trap_cooccurrence: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum WorldCommand {
    /// Generate (and by default calibrate) a synthetic world file.
    Build(WorldBuildArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub world: PathBuf,
    /// tcp:<host:port> or unix:<path>; stdio when absent.
    #[arg(long)]
    pub listen: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ConformanceArgs {
    #[arg(long)]
    pub backend: BackendSpec,
    /// Two image ids, comma separated; taken from the handshake otherwise.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub images: Option<Vec<String>>,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode one caption with CICD against a backend.
    Decode(DecodeArgs),
    /// Regular decoding against CICD on a synthetic corpus.
    Experiment(CorpusArgs),
    /// One CICD run per gate threshold.
    SweepGamma(SweepArgs),
    /// Consistency statistics for a world, or a JSD series for a trace.
    Analyze(AnalyzeArgs),
    #[command(subcommand)]
    World(WorldCommand),
    /// Serve a world over the line protocol.
    ServeSim(ServeArgs),
    /// Run the protocol conformance suite against a backend.
    Conformance(ConformanceArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

/// Parses and runs; `args` excludes the program name.
pub fn run_args(args: &[String]) -> CliResult {
    let argv: Vec<OsString> = std::iter::once(OsString::from("cicd")).chain(args.iter().map(OsString::from)).collect();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    Ok(())
                }
                _ => {
                    let text = e.render().to_string();
                    let text = text.strip_prefix("error: ").unwrap_or(&text).trim_end();
                    Err(CliError::usage(text))
                }
            };
        }
    };
    commands::dispatch(cli, args)
}

pub fn main() -> ExitCode {
    let args: Vec<String> = match std::env::args_os().skip(1).map(|a| a.into_string()).collect() {
        Ok(a) => a,
        Err(bad) => {
            eprintln!("error: argument is not valid UTF-8: {bad:?}");
            return ExitCode::from(1);
        }
    };
    match run_args(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
