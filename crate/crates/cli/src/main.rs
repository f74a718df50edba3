//! `denergy` command-line front end.
//!
//! Exit codes: 0 success, 1 I/O or data error, 2 usage error, 3 asserted
//! verification violations.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use denergy::ScoreMethod;

pub const THREADS_ENV: &str = "DENERGY_THREADS";

#[derive(Debug, Parser)]
#[command(name = "denergy", version, about = "Zero-shot OOD scoring from image-text embeddings")]
struct Cli {
    /// Worker threads; falls back to $DENERGY_THREADS, then to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log verbosity (-v info, -vv debug); RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score every image row against the class text embeddings.
    Score(ScoreArgs),
    /// AUROC and FPR95 from two score files.
    Eval(EvalArgs),
    /// Fine-tune the prompt context with the energy-regularized objective.
    TrainEbm(TrainArgs),
    /// Write a synthetic benchmark dataset and its manifest.
    Synth(SynthArgs),
    /// Run numerical checks of the score's analytic properties.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub texts: PathBuf,
    /// Text embeddings of negative (OOD) labels; delta-energy only.
    #[arg(long)]
    pub neg_texts: Option<PathBuf>,
    #[arg(long, default_value = "delta-energy", value_parser = parse_method)]
    pub method: ScoreMethod,
    #[arg(long, default_value_t = 0.01)]
    pub tau: f64,
    #[arg(long, default_value_t = 2)]
    pub c: usize,
    #[arg(long, default_value_t = 0.9)]
    pub react_percentile: f64,
    #[arg(long, default_value_t = 1.0)]
    pub msp_tau: f64,
    /// Output CSV (`index,score`).
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_method(s: &str) -> Result<ScoreMethod, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = ScoreMethod::ALL.iter().map(|m| m.name()).collect();
        format!("expected one of: {}", names.join(", "))
    })
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub id_scores: PathBuf,
    #[arg(long)]
    pub ood_scores: PathBuf,
    /// Output TOML; printed to stdout as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub lambda0: f64,
    /// Mask retention proportion.
    #[arg(long, default_value_t = 0.5)]
    pub p: f64,
    #[arg(long, default_value_t = 0.01)]
    pub tau: f64,
    /// Cross-entropy temperature; defaults to --tau.
    #[arg(long)]
    pub ce_tau: Option<f64>,
    #[arg(long, default_value_t = 0.002)]
    pub lr: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Shuffling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Prompt checkpoint (`DTHT`) written after training.
    #[arg(long)]
    pub out_theta: PathBuf,
    /// JSON-lines log, one record per epoch (epoch 0 = before training).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Also write the trained text features as an embedding file.
    #[arg(long)]
    pub out_texts: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "default")]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Center classes on prompt-encoder text features (a task prompt tuning
    /// can fit) instead of orthogonal prototypes.
    #[arg(long)]
    pub prompt_task: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Thm1,
    Thm2,
    Thm3,
    Thm4,
    Grad,
    All,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub suite: Suite,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trials per check; each check has its own default.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Full report as TOML.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Violations(usize),
}

impl From<denergy::Error> for Failure {
    fn from(e: denergy::Error) -> Self {
        match e {
            denergy::Error::InvalidConfig(_) => Failure::Usage(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err(Failure::Usage("thread count must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Data(e.to_string()))?;
    }
    match cli.command {
        Command::Score(a) => commands::score(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::TrainEbm(a) => commands::train_ebm(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Verify(a) => commands::verify(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let _ = e.print();
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Violations(n)) => {
            eprintln!("{n} asserted violation(s)");
            ExitCode::from(3)
        }
    }
}
