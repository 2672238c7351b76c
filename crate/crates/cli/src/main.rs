//! `steerlab` — experiment harness over the steering library.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or contract error.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use config::{Baseline, ExperimentConfig, GateChoice, SplitName, WorldKind};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl From<steerlab::Error> for CliError {
    fn from(e: steerlab::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "steerlab", version, about = "Neuron-level steering experiments on toy transformers")]
struct Cli {
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for per-instance work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Suite file (default: <out-dir>/suite.json).
    #[arg(long, global = true)]
    suite: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a synthetic suite, its model and the four-way split.
    MakeSuite(MakeSuiteArgs),
    /// Sample traces on the probe split and build contrastive pairs.
    GenData(GenDataArgs),
    /// Score neurons, filter by polarity, write the top-K steering spec.
    Identify(IdentifyArgs),
    /// Greedy evaluation with and without steering.
    SteerEval(SteerEvalArgs),
    /// Fit the last-token L1 logistic probe baseline.
    Probe,
    /// Train the failure gate on the gate splits.
    TrainGate,
    /// Hidden-state trajectory geometry and activation shifts.
    Trajectory(TrajectoryArgs),
    /// Run every ablation arm on the same split.
    Ablate(AblateArgs),
    /// Accuracy over a strength x top-K grid.
    Sweep(SweepArgs),
    /// Collect outputs into a bundle with a CRC32 manifest.
    Report,
}

#[derive(Debug, Args)]
struct MakeSuiteArgs {
    #[arg(long, value_enum)]
    world: Option<WorldKind>,
    /// Number of planted neurons.
    #[arg(long)]
    planted: Option<usize>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    corrupt_rate: Option<f64>,
    /// Embedding noise of the arithmetic world.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Traces per probe instance.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Keep only instances with exactly POS correct and NEG incorrect traces.
    #[arg(long, value_parser = parse_balance)]
    balance: Option<[usize; 2]>,
}

#[derive(Debug, Args)]
struct IdentifyArgs {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Skip the polarity filter.
    #[arg(long)]
    no_polarity: bool,
}

#[derive(Debug, Args)]
struct SteerEvalArgs {
    /// Strengths to evaluate (comma separated).
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    gate: Option<GateChoice>,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    split: Option<SplitName>,
}

#[derive(Debug, Args)]
struct TrajectoryArgs {
    #[arg(long, value_enum)]
    split: Option<SplitName>,
    #[arg(long)]
    include_prompt: bool,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
}

fn parse_balance(s: &str) -> Result<[usize; 2], String> {
    let (a, b) = s.split_once(',').ok_or("expected POS,NEG")?;
    let p = |x: &str| x.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok([p(a)?, p(b)?])
}

fn settle(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut c = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(d) = &cli.out_dir {
        c.out_dir = d.clone();
    }
    if let Some(s) = &cli.suite {
        c.suite = Some(s.clone());
    }
    match &cli.cmd {
        Command::MakeSuite(a) => {
            set(&mut c.world, a.world);
            set(&mut c.planted, a.planted);
            set(&mut c.instances, a.instances);
            set(&mut c.corrupt_rate, a.corrupt_rate);
            set(&mut c.noise, a.noise);
        }
        Command::GenData(a) => {
            set(&mut c.samples, a.samples);
            set(&mut c.temperature, a.temperature);
            if a.balance.is_some() {
                c.balance = a.balance;
            }
        }
        Command::Identify(a) => {
            set(&mut c.k, a.k);
            if a.alpha.is_some() {
                c.alpha = a.alpha;
            }
            if a.no_polarity {
                c.polarity_filter = false;
            }
        }
        Command::SteerEval(a) => {
            set(&mut c.alphas, a.alpha.clone());
            set(&mut c.gate, a.gate);
            set(&mut c.baseline, a.baseline);
            set(&mut c.k, a.k);
            set(&mut c.eval_split, a.split);
        }
        Command::Trajectory(a) => {
            set(&mut c.eval_split, a.split);
            c.include_prompt |= a.include_prompt;
        }
        Command::Ablate(a) => {
            set(&mut c.k, a.k);
            if a.alpha.is_some() {
                c.alpha = a.alpha;
            }
        }
        Command::Sweep(a) => {
            set(&mut c.sweep_alphas, a.alphas.clone());
            set(&mut c.sweep_ks, a.ks.clone());
        }
        Command::Probe | Command::TrainGate | Command::Report => {}
    }
    c.validate()?;
    Ok(c)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = settle(cli)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    match &cli.cmd {
        Command::MakeSuite(_) => commands::make_suite(&cfg),
        Command::GenData(_) => commands::gen_data(&cfg),
        Command::Identify(_) => commands::identify(&cfg),
        Command::SteerEval(_) => commands::steer_eval(&cfg),
        Command::Probe => commands::probe(&cfg),
        Command::TrainGate => commands::train_gate(&cfg),
        Command::Trajectory(_) => commands::trajectory(&cfg),
        Command::Ablate(_) => commands::ablate(&cfg),
        Command::Sweep(_) => commands::sweep(&cfg),
        Command::Report => report::report(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let start = Instant::now();
    match run(&cli) {
        Ok(()) => {
            log(&format!("done in {:.2}s", start.elapsed().as_secs_f64()));
            ExitCode::SUCCESS
        }
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

/// Progress and timing go to stderr only, never into data files.
pub fn log(msg: &str) {
    eprintln!("[steerlab] {msg}");
}
