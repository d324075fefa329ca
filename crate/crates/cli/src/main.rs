use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sentinel_core::alerts::{AlertLevel, EscapeModel};
use sentinel_core::metrics::Excision;

mod files;
mod net;
mod tables;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

pub fn data_err(context: impl std::fmt::Display) -> impl FnOnce(String) -> CliError {
    move |e| CliError::Data(format!("{context}: {e}"))
}

#[derive(Parser)]
#[command(name = "sentinel", version, about = "Eclipse-attack detection for Bitcoin light clients")]
struct Cli {
    /// Log filter, e.g. "info" or "sentinel_service=debug".
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a gossip-enabled HTTP server.
    Serve(ServeArgs),
    /// Run the client daemon: proxy hook, periodic checks and alerts.
    Daemon(DaemonArgs),
    /// Poll known gossip servers once and report.
    Check(CheckArgs),
    /// Run seeded eclipse scenarios.
    Simulate(SimulateArgs),
    /// Compute coverage, AADT and freshness for a connection trace.
    Analyze(AnalyzeArgs),
    /// Print model tables next to the published values.
    Tables {
        #[command(subcommand)]
        which: TableCommand,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8333")]
    listen: std::net::SocketAddr,
    #[arg(long, default_value_t = 2016)]
    window: usize,
    /// Initial view: raw concatenated 80-byte headers.
    #[arg(long)]
    headers: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    anchor_height: u64,
}

#[derive(Args)]
struct DaemonArgs {
    /// TOML file mirroring the daemon configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    active_sample: Option<usize>,
    /// Local view: raw concatenated 80-byte headers.
    #[arg(long)]
    headers: Option<PathBuf>,
    /// Address for the forward-proxy hook.
    #[arg(long)]
    proxy: Option<std::net::SocketAddr>,
    /// Seconds between active checks; 0 disables them.
    #[arg(long, default_value_t = 0)]
    check_interval: u64,
    /// Run one active check and one tick, then exit.
    #[arg(long)]
    once: bool,
}

#[derive(Args)]
struct CheckArgs {
    /// Poll now (the only mode).
    #[arg(long)]
    now: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra server base URL; repeatable.
    #[arg(long = "server")]
    servers: Vec<String>,
    #[arg(long)]
    headers: Option<PathBuf>,
    #[arg(long)]
    active_sample: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario file, TOML or JSON.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Histogram bin width in minutes.
    #[arg(long, default_value_t = 10.0)]
    bin: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExcisionArg {
    Both,
    NumeratorOnly,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// CSV with header time,user,server.
    #[arg(long)]
    trace: PathBuf,
    /// Metric spec, TOML or JSON.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Server set, comma separated.
    #[arg(long, value_delimiter = ',')]
    servers: Option<Vec<String>>,
    /// Observation window start, seconds.
    #[arg(long)]
    t0: Option<i64>,
    /// Observation window end, seconds.
    #[arg(long)]
    t_max: Option<i64>,
    #[arg(long)]
    no_cut: bool,
    #[arg(long, value_enum)]
    excision: Option<ExcisionArg>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Yellow,
    Orange,
    Red,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Tabulated,
    NominalRate,
}

#[derive(Subcommand)]
enum TableCommand {
    /// Probability of n or fewer blocks in t minutes.
    AlertProbs {
        #[arg(long, default_value_t = 12.0)]
        mean: f64,
        #[arg(long, value_delimiter = ',')]
        times: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        blocks: Option<Vec<u32>>,
        #[arg(long)]
        csv: bool,
    },
    /// Yellow, orange and red thresholds in minutes.
    Thresholds {
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<u32>>,
        #[arg(long, value_delimiter = ',')]
        confirmations: Option<Vec<usize>>,
        #[arg(long, default_value_t = 12.0)]
        mean: f64,
        #[arg(long)]
        csv: bool,
    },
    /// Probability that an alpha-strong attacker outruns the alert.
    AttackProbs {
        #[arg(long, value_delimiter = ',')]
        alpha: Option<Vec<f64>>,
        #[arg(long, value_enum, value_delimiter = ',')]
        level: Option<Vec<LevelArg>>,
        #[arg(long, default_value_t = 7)]
        blocks: u32,
        #[arg(long, default_value_t = 12.0)]
        mean: f64,
        #[arg(long, value_enum, default_value = "tabulated")]
        model: ModelArg,
        #[arg(long)]
        csv: bool,
    },
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--{name} must be positive")))
    }
}

fn run_tables(which: TableCommand) -> Result<String, CliError> {
    match which {
        TableCommand::AlertProbs { mean, times, blocks, csv } => {
            positive("mean", mean)?;
            let times = times.unwrap_or_else(|| tables::REFERENCE_TIMES.to_vec());
            if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
                return Err(CliError::Usage("--times must be non-negative".into()));
            }
            let blocks = blocks.unwrap_or_else(|| tables::REFERENCE_BLOCKS.to_vec());
            Ok(tables::alert_probs(&times, &blocks, mean, csv))
        }
        TableCommand::Thresholds { k, confirmations, mean, csv } => {
            positive("mean", mean)?;
            let (k, confirmations) = match (k, confirmations) {
                (None, None) => (vec![1, 7], vec![6]),
                (k, c) => (k.unwrap_or_default(), c.unwrap_or_default()),
            };
            if k.contains(&0) || confirmations.contains(&0) {
                return Err(CliError::Usage("block counts must be positive".into()));
            }
            Ok(tables::thresholds(&k, &confirmations, mean, csv))
        }
        TableCommand::AttackProbs { alpha, level, blocks, mean, model, csv } => {
            positive("mean", mean)?;
            if blocks == 0 {
                return Err(CliError::Usage("--blocks must be positive".into()));
            }
            let alphas = alpha.unwrap_or_else(|| tables::REFERENCE_ALPHAS.to_vec());
            let levels: Vec<AlertLevel> = match level {
                None => AlertLevel::ALARMS.to_vec(),
                Some(ls) => ls
                    .into_iter()
                    .map(|l| match l {
                        LevelArg::Yellow => AlertLevel::Yellow,
                        LevelArg::Orange => AlertLevel::Orange,
                        LevelArg::Red => AlertLevel::Red,
                    })
                    .collect(),
            };
            let escape = match model {
                ModelArg::Tabulated => EscapeModel::Tabulated,
                ModelArg::NominalRate => EscapeModel::NominalRate,
            };
            tables::attack_probs(&alphas, &levels, blocks, mean, escape, csv)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Tables { which } => {
            print!("{}", run_tables(which)?);
            Ok(())
        }
        Command::Simulate(a) => {
            let text = files::simulate(a.scenario.as_deref(), &a.out, a.runs, a.threads, a.seed, a.bin)?;
            print!("{text}");
            Ok(())
        }
        Command::Analyze(a) => {
            let excision = a.excision.map(|e| match e {
                ExcisionArg::Both => Excision::Both,
                ExcisionArg::NumeratorOnly => Excision::NumeratorOnly,
            });
            let opts = files::AnalyzeOptions {
                spec: a.spec,
                servers: a.servers,
                t0: a.t0,
                t_max: a.t_max,
                no_cut: a.no_cut,
                excision,
                seed: a.seed,
            };
            let text = files::analyze(&a.trace, a.out.as_deref(), &opts)?;
            print!("{text}");
            Ok(())
        }
        Command::Serve(a) => net::serve(a.listen, a.window, a.headers.as_deref(), a.anchor_height),
        Command::Daemon(a) => net::daemon(net::DaemonOptions {
            config: a.config,
            active_sample: a.active_sample,
            headers: a.headers,
            proxy: a.proxy,
            check_interval: a.check_interval,
            once: a.once,
        }),
        Command::Check(a) => {
            if !a.now {
                return Err(CliError::Usage("check needs --now".into()));
            }
            net::check(a.config.as_deref(), a.servers, a.headers.as_deref(), a.active_sample)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let filter = tracing_subscriber::EnvFilter::try_new(&cli.log).unwrap_or_else(|_| "warn".into());
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sentinel: {e}");
            ExitCode::from(e.code())
        }
    }
}
