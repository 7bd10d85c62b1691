//! `hlmg`: dataset generation, training, evaluation and analysis runs.

mod commands;
mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

pub const VERSION: &str = env!("HLMG_BUILD_VERSION");

#[derive(Parser)]
#[command(name = "hlmg", version = VERSION, about = "Graph reasoning with a hierarchical language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset (JSONL plus vocabulary).
    Gen(Flags),
    /// Train a model; writes a checkpoint and metrics.
    Train(Flags),
    /// Accuracy of a checkpoint on a dataset split.
    Eval(Flags),
    /// Accuracy drop under random node relabelings.
    Robustness(Flags),
    /// Node-importance rankings, Recall@k, fidelity and layer curves.
    Interpret(Flags),
    /// Local versus full attention timing and FLOP counts.
    Bench(Flags),
    /// Finite-difference check of the full-model gradient.
    GradCheck(Flags),
}

impl Command {
    fn parts(&self) -> (&'static str, &Flags) {
        match self {
            Command::Gen(f) => ("gen", f),
            Command::Train(f) => ("train", f),
            Command::Eval(f) => ("eval", f),
            Command::Robustness(f) => ("robustness", f),
            Command::Interpret(f) => ("interpret", f),
            Command::Bench(f) => ("bench", f),
            Command::GradCheck(f) => ("grad-check", f),
        }
    }
}

#[derive(Args, Clone, Debug, Default)]
struct Flags {
    #[arg(long)]
    task: Option<String>,
    /// desk or paper
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// cgdl, adjlist or edges
    #[arg(long)]
    dialect: Option<String>,
    /// mean or concat
    #[arg(long)]
    pooling: Option<String>,
    #[arg(long)]
    alpha_init: Option<f64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat `key = value` config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset JSONL written by `gen`
    #[arg(long)]
    data: Option<PathBuf>,
    /// Extra `key=value` settings; override both file and flags
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    MissingFile(String),
    Mismatch(String),
    Other(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::MissingFile(_) => 3,
            CliError::Mismatch(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::MissingFile(_) => "missing_file",
            CliError::Mismatch(_) => "mismatch",
            CliError::Other(_) => "runtime",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::MissingFile(m) | CliError::Mismatch(m) | CliError::Other(m) => m,
        }
    }

    pub fn from_io(path: &Path, e: std::io::Error) -> Self {
        let msg = format!("{}: {e}", path.display());
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingFile(msg)
        } else {
            CliError::Other(msg)
        }
    }
}

impl<E: Into<hlmg::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        let e: hlmg::Error = e.into();
        if e.io_kind() == Some(std::io::ErrorKind::NotFound) {
            CliError::MissingFile(e.to_string())
        } else if e.is_mismatch() {
            CliError::Mismatch(e.to_string())
        } else {
            CliError::Other(e.to_string())
        }
    }
}

fn values(flags: &Flags) -> Result<BTreeMap<String, String>, CliError> {
    let mut v = match &flags.config {
        Some(p) => config::parse_file(p)?,
        None => BTreeMap::new(),
    };
    let mut put = |k: &str, x: Option<String>| {
        if let Some(x) = x {
            v.insert(k.to_string(), x);
        }
    };
    put("task", flags.task.clone());
    put("preset", flags.preset.clone());
    put("seed", flags.seed.map(|s| s.to_string()));
    put("dialect", flags.dialect.clone());
    put("pooling", flags.pooling.clone());
    put("alpha_init", flags.alpha_init.map(|a| a.to_string()));
    put("out", flags.out.as_ref().map(|p| p.display().to_string()));
    put("checkpoint", flags.checkpoint.as_ref().map(|p| p.display().to_string()));
    put("data", flags.data.as_ref().map(|p| p.display().to_string()));
    for pair in &flags.set {
        let (k, x) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        v.insert(config::normalize_key(k), x.trim().to_string());
    }
    Ok(v)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, flags) = cli.command.parts();
    let rc = RunConfig::resolve(name, values(flags)?)?;
    match cli.command {
        Command::Gen(_) => commands::gen(rc),
        Command::Train(_) => commands::train(rc),
        Command::Eval(_) => commands::eval(rc),
        Command::Robustness(_) => commands::robustness(rc),
        Command::Interpret(_) => commands::interpret(rc),
        Command::Bench(_) => commands::bench(rc),
        Command::GradCheck(_) => commands::grad_check(rc),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let diag = serde_json::json!({
                "error": e.kind(),
                "message": e.message(),
                "exit_code": e.code(),
            });
            eprintln!("{diag}");
            ExitCode::from(e.code())
        }
    }
}
