//! `telecare`: run the gateway, drive simulated patient fleets, probe
//! availability and produce the evaluation reports.
//!
//! Exit status: 0 success; 1 completed with findings (report discrepancies,
//! halted hubs); 2 command-line usage error; 3 unreadable or invalid input;
//! 4 runtime failure (bind, data directory, network, output file).

mod exit;
mod probe;
mod report;
mod serve;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};

use exit::{CliError, Status};

#[derive(Debug, Parser)]
#[command(
    name = "telecare",
    version,
    about = "Tele-monitoring gateway operations"
)]
struct Cli {
    /// Machine-readable JSON on stdout instead of text.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the gateway until interrupted.
    Serve(ServeArgs),
    /// Run a fleet of simulated patient hubs against a gateway.
    Simulate(SimulateArgs),
    /// Probe a gateway's health endpoint and write a probe log.
    Probe(ProbeArgs),
    /// Analyze a probe log or a questionnaire dataset.
    Report {
        #[command(subcommand)]
        kind: ReportKind,
    },
}

#[derive(Debug, clap::Args)]
pub struct ServeArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides `bind` from the configuration.
    #[arg(long)]
    bind: Option<String>,
    /// Overrides `data_dir` from the configuration.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct SimulateArgs {
    /// TOML fleet configuration.
    #[arg(long, short)]
    config: PathBuf,
    /// Gateway base URL.
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    gateway: String,
    /// Simulated run length; overrides `duration_secs` (e.g. `10m`, `48h`).
    #[arg(long, value_parser = humantime::parse_duration)]
    duration: Option<Duration>,
    /// Simulated seconds per wall-clock second. Match the gateway's clock.
    #[arg(long, default_value_t = 1.0)]
    time_scale: f64,
}

#[derive(Debug, clap::Args)]
pub struct ProbeArgs {
    /// Gateway base URL.
    #[arg(long)]
    target: String,
    /// Time between probes (simulated time when scaled).
    #[arg(long, default_value = "60s", value_parser = humantime::parse_duration)]
    interval: Duration,
    /// Length of the probing run (simulated time when scaled).
    #[arg(long, value_parser = humantime::parse_duration)]
    duration: Duration,
    /// A probe without a well-formed answer within this wall time counts as down.
    #[arg(long, default_value = "2s", value_parser = humantime::parse_duration)]
    timeout: Duration,
    /// Where to write the probe log.
    #[arg(long, short)]
    output: PathBuf,
    /// Simulated seconds per wall-clock second. Match the gateway's clock.
    #[arg(long, default_value_t = 1.0)]
    time_scale: f64,
}

#[derive(Debug, Subcommand)]
pub enum ReportKind {
    /// Uptime, downtime, failures, MTTR, MTBF, reliability and availability.
    Reliability {
        /// Probe log; the bundled evaluation log when omitted.
        log: Option<PathBuf>,
        /// Published table to check against. Defaults to the bundled one for the bundled log.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Skip the comparison against a reference table.
        #[arg(long, conflicts_with = "reference")]
        no_reference: bool,
    },
    /// Item statistics and composite metrics for a Likert questionnaire.
    Survey {
        /// Dataset; the bundled questionnaire when omitted.
        dataset: Option<PathBuf>,
        /// Composite definitions, one `NAME = ITEM, ITEM, ...` per line; SEU and SDR by default.
        #[arg(long)]
        composites: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<Status, CliError> {
    match cli.command {
        Command::Serve(args) => serve::run(args, cli.json),
        Command::Simulate(args) => simulate::run(args, cli.json),
        Command::Probe(args) => probe::run(args, cli.json),
        Command::Report { kind } => report::run(kind, cli.json),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Command::Serve(_)) {
        "info"
    } else {
        "warn"
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .init();
    match run(cli) {
        Ok(status) => status.into(),
        Err(e) => {
            eprintln!("telecare: {e}");
            e.exit_code()
        }
    }
}
