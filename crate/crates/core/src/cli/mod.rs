//! Command-line front end: `serve`, `campaign`, `analyze`, `probe`, `lab`.
//!
//! Every result file is JSONL whose first line is a [`RunManifest`] wrapped
//! as `{"manifest": ...}`. Record lines follow in the order they were
//! produced; each is flushed as soon as it is written, so an interrupted run
//! leaves a valid prefix.

mod analyze;
mod commands;
mod writer;

use std::ffi::OsString;
use std::net::IpAddr;
use std::path::PathBuf;

use chrono::{SecondsFormat, Utc};
use clap::{ArgAction, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use analyze::{analyze_files, AnalyzeOutput, AnalyzeStats, Record};
pub use writer::ResultWriter;

/// Exit statuses shared by every subcommand.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    /// A lab scenario ran but one of its checks failed.
    pub const CHECK_FAILED: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const PRIVILEGE: i32 = 3;
    pub const RUNTIME: i32 = 4;
    pub const INTERRUPTED: i32 = 130;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("insufficient privileges: {0}")]
    Privilege(String),
    #[error("{0}")]
    Runtime(String),
    #[error("interrupted; partial results kept")]
    Interrupted,
    #[error("{0}")]
    ChecksFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Privilege(_) => exit::PRIVILEGE,
            CliError::Runtime(_) => exit::RUNTIME,
            CliError::Interrupted => exit::INTERRUPTED,
            CliError::ChecksFailed(_) => exit::CHECK_FAILED,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "wireimage",
    version,
    about = "Paired TCP and TCP-over-UDP measurements, probing and an impairment lab"
)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the data server and, with --tunnel-peer, the tunnel endpoint.
    Serve(ServeArgs),
    /// Run paired flows against a target list.
    Campaign(CampaignArgs),
    /// Aggregate result files into matrix, CDF and grouped-summary tables.
    Analyze(AnalyzeArgs),
    /// Send TTL-limited probes, once or every round interval.
    Probe(ProbeArgs),
    /// Run impairment-lab scenarios.
    Lab(LabArgs),
}

/// One element of a comma-separated list flag.
fn item<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    let t = s.trim();
    t.parse::<T>().map_err(|e| format!("{t:?}: {e}"))
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Comma-separated TCP ports; defaults to the seven campaign ports.
    #[arg(long, value_parser = item::<u16>, value_delimiter = ',')]
    pub ports: Option<Vec<u16>>,
    #[arg(long, default_value = "0.0.0.0")]
    pub bind: IpAddr,
    /// Client address to accept tunneled traffic from; starts a tunnel
    /// endpoint that mirrors the served ports.
    #[arg(long)]
    pub tunnel_peer: Option<IpAddr>,
    /// Local address of the tunnel's outer sockets (default: route source
    /// toward the peer).
    #[arg(long)]
    pub tunnel_local: Option<IpAddr>,
    #[arg(long, default_value = "wimg0")]
    pub tunnel_if: String,
    #[arg(long)]
    pub max_request: Option<u32>,
    /// Write a manifest and a final statistics line here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CampaignArgs {
    /// JSON campaign configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated destinations.
    #[arg(long, value_parser = item::<String>, value_delimiter = ',')]
    pub targets: Option<Vec<String>>,
    /// File with one destination per line (`#` comments allowed).
    #[arg(long)]
    pub target_file: Option<PathBuf>,
    #[arg(long, value_parser = item::<u16>, value_delimiter = ',')]
    pub ports: Option<Vec<u16>>,
    /// Flow sizes in initial windows.
    #[arg(long, value_parser = item::<u32>, value_delimiter = ',')]
    pub sizes_iw: Option<Vec<u32>>,
    /// Pairs per size (replaces the per-size counts of the schedule).
    #[arg(long)]
    pub pairs: Option<u32>,
    #[arg(long)]
    pub source: Option<String>,
    #[arg(long)]
    pub inter_pair_delay_ms: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSONL output; `-` for stdout.
    #[arg(long, default_value = "-")]
    pub out: PathBuf,
    /// Pcap of the client-side packets (emulated runs only).
    #[arg(long)]
    pub capture: Option<PathBuf>,
    /// Run against the impairment lab instead of the network: `none` or a
    /// profile file.
    #[arg(long)]
    pub emulate: Option<String>,
    #[arg(long, default_value_t = 100.0)]
    pub link_rate_mbps: f64,
    #[arg(long, default_value_t = 20.0)]
    pub link_delay_ms: f64,
    #[arg(long, default_value_t = 500_000)]
    pub link_buffer_bytes: usize,
    /// Virtual interface name for the client tunnel.
    #[arg(long, default_value = "wimg0")]
    pub tunnel_if: String,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Result files (JSONL).
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = crate::metrics::DEFAULT_TP_THRESHOLD_KBPS)]
    pub tp_threshold: f64,
    #[arg(long, default_value_t = crate::metrics::DEFAULT_RTT_THRESHOLD_MS)]
    pub rtt_threshold: f64,
    /// Lines of `node region` used to order matrix rows.
    #[arg(long)]
    pub regions: Option<PathBuf>,
    #[arg(long, value_parser = item::<String>, value_delimiter = ',')]
    pub region_order: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long, value_parser = item::<IpAddr>, value_delimiter = ',')]
    pub targets: Option<Vec<IpAddr>>,
    /// Target list: `address [port]` per line.
    #[arg(long)]
    pub target_file: Option<PathBuf>,
    #[arg(long, value_parser = item::<crate::prober::ProbeProtocol>, value_delimiter = ',', default_value = "udp,tcp,icmp")]
    pub protocols: Vec<crate::prober::ProbeProtocol>,
    #[arg(long, default_value_t = crate::prober::DEFAULT_TTL)]
    pub ttl: u8,
    #[arg(long, default_value_t = crate::prober::DEFAULT_ATTEMPTS)]
    pub attempts: u32,
    #[arg(long, default_value_t = 5000)]
    pub timeout_ms: u64,
    #[arg(long, default_value_t = crate::prober::DEFAULT_UDP_PORT)]
    pub udp_port: u16,
    #[arg(long, default_value_t = crate::prober::DEFAULT_TCP_PORT)]
    pub tcp_port: u16,
    /// Also run a UDP/ICMP size sweep at these IP packet payload sizes.
    #[arg(long, value_parser = item::<usize>, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// A single round instead of one every --interval-s.
    #[arg(long)]
    pub once: bool,
    #[arg(long, default_value_t = crate::prober::ROUND_INTERVAL.as_secs())]
    pub interval_s: u64,
    /// Stop after this many rounds (daemon mode).
    #[arg(long)]
    pub rounds: Option<u64>,
    #[arg(long)]
    pub source: Option<std::net::Ipv4Addr>,
    #[arg(long, default_value = "-")]
    pub out: PathBuf,
    /// Probe an emulated path instead of the network: `none` or a profile
    /// file.
    #[arg(long)]
    pub emulate: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub emulate_hops: u8,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct LabArgs {
    /// Bundled scenario names.
    pub scenarios: Vec<String>,
    #[arg(long)]
    pub all: bool,
    #[arg(long)]
    pub list: bool,
    /// JSON scenario definitions (one object or an array).
    #[arg(long)]
    pub scenario_file: Option<PathBuf>,
    /// Replace each scenario's profile with this key=value file.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "-")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostInfo {
    pub hostname: String,
    pub os: String,
    pub arch: String,
}

impl HostInfo {
    pub fn current() -> Self {
        Self { hostname: hostname(), os: std::env::consts::OS.into(), arch: std::env::consts::ARCH.into() }
    }
}

fn hostname() -> String {
    let mut buf = [0u8; 256];
    // SAFETY: buf is writable for its full length.
    let rc = unsafe { libc::gethostname(buf.as_mut_ptr().cast(), buf.len()) };
    if rc != 0 {
        return "unknown".into();
    }
    let end = buf.iter().position(|&b| b == 0).unwrap_or(buf.len());
    String::from_utf8_lossy(&buf[..end]).into_owned()
}

/// Fixed-width UTC timestamp so the manifest line can be rewritten in place.
pub fn timestamp_now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Micros, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command_line: Vec<String>,
    pub command: String,
    pub config: serde_json::Value,
    pub started_at: String,
    /// Filled in when the run ends; stays null if it never did or the
    /// output could not be rewritten (a pipe).
    pub finished_at: Option<String>,
    pub host: HostInfo,
    pub seeds: Vec<u64>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seeds: Vec<u64>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command_line: std::env::args().collect(),
            command: command.into(),
            config,
            started_at: timestamp_now(),
            finished_at: None,
            host: HostInfo::current(),
            seeds,
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_millis()
        .try_init();
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::CONFIG } else { exit::SUCCESS };
        }
    };
    init_logging(cli.verbose);
    let result = match cli.command {
        Command::Serve(a) => commands::serve(a),
        Command::Campaign(a) => commands::campaign(a),
        Command::Analyze(a) => analyze::cmd_analyze(a),
        Command::Probe(a) => commands::probe(a),
        Command::Lab(a) => commands::lab(a),
    };
    match result {
        Ok(()) => exit::SUCCESS,
        Err(e) => {
            eprintln!("wireimage: {e}");
            e.exit_code()
        }
    }
}
