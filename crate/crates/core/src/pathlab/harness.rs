//! Scenario runner: drives flowpair, prober or racing traffic through an
//! emulated path and reports what was measured next to the ground truth.

use std::collections::{BTreeMap, HashSet};
use std::net::IpAddr;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::probe_path::EmulatedProbePath;
use super::profile::{ImpairmentProfile, Scope};
use super::sim::{simulate, FlowKind, FlowSetup, LinkModel, Path, SimFlow, SimOptions, SERVER_ADDR};
use super::transit::{transit, Decision, Direction, DropReason, PacketMeta, PathState, Protocol};
use super::{PathLabError, LAB_EPOCH_S};
use crate::flowpair::{
    decide, race_connect, run_campaign, CampaignConfig, CampaignSummary, FlowSpec, Handshake, HandshakeRacer,
    PairDriver, PairOutcome, PairResult, PairTimestamps, Transport, DEFAULT_HEAD_START, DEFAULT_IW_SEGMENTS,
    DEFAULT_MSS,
};
use crate::metrics::capture::CapturedPacket;
use crate::metrics::{classify_blocked, conn_bias, median, ConnAttempt};
use crate::prober::{
    classify_blocked_origin, MtuSweep, ProbeOutcome, ProbeProtocol, ProbeResult, ProbeSpec, Prober, DEFAULT_UDP_PORT,
    SWEEP_SIZES,
};

/// Largest median |bias| in percent still read as "no bias".
pub const NEUTRAL_TOLERANCE_PCT: f64 = 5.0;
/// Allowed distance between measured and expected median RTT bias.
pub const LATENCY_TOLERANCE_PCT: f64 = 10.0;
pub const SOURCE_NAME: &str = "lab-client";

fn default_link() -> LinkModel {
    LinkModel { rate_mbps: 100.0, one_way_delay_ms: 20.0, buffer_bytes: 500_000 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairWorkload {
    pub ports: Vec<u16>,
    /// (size in initial windows, pair count)
    pub schedule: Vec<(u32, u32)>,
    pub iw_segments: u32,
    pub inter_pair_delay_ms: u64,
    pub connect_timeout_ms: u64,
    pub stall_timeout_ms: u64,
    pub attempts_before_skip: u32,
}

impl Default for PairWorkload {
    fn default() -> Self {
        Self {
            ports: vec![443],
            schedule: vec![(1, 20), (3, 20), (30, 20)],
            iw_segments: DEFAULT_IW_SEGMENTS,
            inter_pair_delay_ms: 100,
            connect_timeout_ms: 10_000,
            stall_timeout_ms: 30_000,
            attempts_before_skip: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepWorkload {
    pub sizes: Vec<usize>,
    pub ttl: u8,
    pub hops: u8,
    pub attempts: u32,
    pub hop_delay_ms: f64,
    pub udp_port: u16,
    pub tcp_port: u16,
}

impl Default for SweepWorkload {
    fn default() -> Self {
        Self {
            sizes: SWEEP_SIZES.to_vec(),
            ttl: crate::prober::DEFAULT_TTL,
            hops: 10,
            attempts: crate::prober::DEFAULT_ATTEMPTS,
            hop_delay_ms: 2.0,
            udp_port: DEFAULT_UDP_PORT,
            tcp_port: 443,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RaceWorkload {
    pub port: u16,
    /// Emulated-clock races decided by [`decide`].
    pub rounds: u32,
    pub timeout_ms: u64,
    pub head_start_ms: u64,
    /// Also run one wall-clock [`race_connect`] against the emulator.
    pub realtime: bool,
}

impl Default for RaceWorkload {
    fn default() -> Self {
        Self {
            port: 443,
            rounds: 5,
            timeout_ms: 2_000,
            head_start_ms: DEFAULT_HEAD_START.as_millis() as u64,
            realtime: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NatWorkload {
    /// Silence between a response and the next inbound packet, seconds.
    pub idle_s: Vec<f64>,
}

impl Default for NatWorkload {
    fn default() -> Self {
        Self { idle_s: vec![30.0, 120.0, 179.0, 181.0, 600.0, 1800.0, 3599.0, 3601.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Workload {
    Pairs(PairWorkload),
    ProbeSweep(SweepWorkload),
    Race(RaceWorkload),
    NatIdle(NatWorkload),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub profile: ImpairmentProfile,
    #[serde(default = "default_link")]
    pub path: LinkModel,
    #[serde(default)]
    pub seed: u64,
    pub workload: Workload,
}

impl Scenario {
    pub fn new(name: &str, profile: ImpairmentProfile, workload: Workload) -> Self {
        Self { name: name.into(), description: String::new(), profile, path: default_link(), seed: 1, workload }
    }

    pub fn validate(&self) -> Result<(), PathLabError> {
        self.profile.validate()?;
        let setup = |m: &str| Err(PathLabError::Setup(format!("scenario {:?}: {m}", self.name)));
        if !(self.path.rate_mbps > 0.0 && self.path.rate_mbps.is_finite()) {
            return setup("link rate must be positive");
        }
        if !(self.path.one_way_delay_ms >= 0.0) || self.path.buffer_bytes < 1500 {
            return setup("link delay must be non-negative and the buffer hold a full packet");
        }
        match &self.workload {
            Workload::Pairs(w) => {
                if w.ports.is_empty() || w.schedule.is_empty() || w.schedule.iter().any(|&(s, c)| s == 0 || c == 0) {
                    return setup("pair workload needs ports and a schedule of positive sizes and counts");
                }
            }
            Workload::ProbeSweep(w) => {
                if w.hops == 0 || w.ttl == 0 || w.attempts == 0 || w.sizes.is_empty() {
                    return setup("probe workload needs hops, ttl, attempts and sizes");
                }
            }
            Workload::Race(w) => {
                if w.rounds == 0 || w.timeout_ms == 0 {
                    return setup("race workload needs rounds and a timeout");
                }
            }
            Workload::NatIdle(w) => {
                if w.idle_s.is_empty() || w.idle_s.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
                    return setup("NAT workload needs non-negative idle gaps");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub profile: ImpairmentProfile,
    pub path: LinkModel,
    pub seed: u64,
    pub workload: Workload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.into(), passed, detail }
    }
}

/// Per-pair observations that do not belong in the result records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDiagnostics {
    pub source_port: u16,
    pub tcp_max_wire_len: usize,
    pub udp_max_wire_len: usize,
    pub tcp_mss: Option<u16>,
    pub udp_mss: Option<u16>,
    /// Tunneled packets whose wire size was not inner + overhead.
    pub wire_len_violations: u64,
    pub tcp_drops: BTreeMap<String, u64>,
    pub udp_drops: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSummary {
    pub n_pairs: usize,
    pub n_both_ok: usize,
    pub conn_bias: Option<f64>,
    pub classified_blocked: bool,
    pub median_tp_bias: Option<f64>,
    pub median_rtt_bias: Option<f64>,
    pub median_abs_tp_bias: Option<f64>,
    pub median_abs_rtt_bias: Option<f64>,
    pub median_tcp_throughput_kbps: Option<f64>,
    pub median_udp_throughput_kbps: Option<f64>,
}

impl BiasSummary {
    pub fn from_pairs(pairs: &[PairResult]) -> Self {
        let attempts: Vec<ConnAttempt> = pairs.iter().map(PairResult::attempt).collect();
        let tp: Vec<f64> = pairs.iter().filter_map(|p| p.tp_bias).collect();
        let rtt: Vec<f64> = pairs.iter().filter_map(|p| p.rtt_bias).collect();
        let abs = |v: &[f64]| median(&v.iter().map(|x| x.abs()).collect::<Vec<_>>());
        let ok_tp = |f: fn(&PairResult) -> &crate::flowpair::FlowResult| {
            median(&pairs.iter().map(f).filter(|r| r.success).map(|r| r.throughput_kbps).collect::<Vec<_>>())
        };
        Self {
            n_pairs: pairs.len(),
            n_both_ok: pairs.iter().filter(|p| p.tcp.success && p.udp.success).count(),
            conn_bias: conn_bias(&attempts).ok(),
            classified_blocked: classify_blocked(&attempts),
            median_tp_bias: median(&tp),
            median_rtt_bias: median(&rtt),
            median_abs_tp_bias: abs(&tp),
            median_abs_rtt_bias: abs(&rtt),
            median_tcp_throughput_kbps: ok_tp(|p| &p.tcp),
            median_udp_throughput_kbps: ok_tp(|p| &p.udp),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceRound {
    pub udp_handshake_ms: Option<f64>,
    pub tcp_handshake_ms: Option<f64>,
    pub winner: Option<Transport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NatObservation {
    pub protocol: Protocol,
    pub idle_s: f64,
    pub inbound_delivered: bool,
    pub drop_reason: Option<DropReason>,
    /// What the profile's idle timeout predicts.
    pub expected_delivered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessReport {
    pub scenario: String,
    pub ground_truth: GroundTruth,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pairs: Vec<PairResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pair_diagnostics: Vec<PairDiagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub campaign: Option<CampaignSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<BiasSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probes: Vec<ProbeResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<MtuSweep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub udp_blocked_origin: Option<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub race: Vec<RaceRound>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub race_connect: Option<Result<Transport, String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nat: Vec<NatObservation>,
    pub checks: Vec<Check>,
}

impl HarnessReport {
    fn new(s: &Scenario) -> Self {
        Self {
            scenario: s.name.clone(),
            ground_truth: GroundTruth {
                profile: s.profile.clone(),
                path: s.path,
                seed: s.seed,
                workload: s.workload.clone(),
            },
            pairs: Vec::new(),
            pair_diagnostics: Vec::new(),
            campaign: None,
            bias: None,
            probes: Vec::new(),
            sweep: None,
            udp_blocked_origin: None,
            race: Vec::new(),
            race_connect: None,
            nat: Vec::new(),
            checks: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Runs paired flows over one emulated path; the virtual clock carries
/// over between pairs.
pub struct EmulatedPairDriver {
    pub path: Path,
    pub options: SimOptions,
    pub diagnostics: Vec<PairDiagnostics>,
    /// Client-side packets of every flow when `options.capture` is set.
    pub captured: Vec<CapturedPacket>,
    rng: ChaCha8Rng,
}

impl EmulatedPairDriver {
    pub fn new(path: Path, options: SimOptions, seed: u64) -> Self {
        Self {
            path,
            options,
            diagnostics: Vec::new(),
            captured: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5041_4952),
        }
    }
}

fn unix_s(us: u64) -> f64 {
    LAB_EPOCH_S + us as f64 / 1e6
}

impl PairDriver for EmulatedPairDriver {
    fn run_flows(&mut self, spec: &FlowSpec) -> PairOutcome {
        let size = spec.payload_bytes().ok().and_then(|b| u32::try_from(b).ok()).unwrap_or(0);
        let src_port = self.rng.random_range(32_768..61_000);
        let mut opts = self.options.clone();
        opts.iw_segments = spec.iw_segments;
        opts.seed = self.rng.random();
        let setup = |kind| FlowSetup { kind, request: Some(size), start_us: 0, src_port, dst_port: spec.port };
        // Alternate which flow the event queue sees first.
        let native_first = self.rng.random_bool(0.5);
        let order =
            if native_first { [FlowKind::Native, FlowKind::Tunneled] } else { [FlowKind::Tunneled, FlowKind::Native] };
        let flows = match simulate(&mut self.path, &opts, &order.map(setup)) {
            Ok(f) => f,
            Err(e) => {
                log::error!("emulation failed: {e}");
                let r = crate::flowpair::FlowResult::failed(crate::flowpair::FailureReason::Reset, 0, 0.0, None);
                return PairOutcome { tcp: r.clone(), udp: r, timestamps: PairTimestamps::default() };
            }
        };
        let (mut tcp, mut udp): (Option<SimFlow>, Option<SimFlow>) = (None, None);
        for f in flows {
            match f.kind {
                FlowKind::Native => tcp = Some(f),
                FlowKind::Tunneled => udp = Some(f),
            }
        }
        let (mut tcp, mut udp) = (tcp.expect("native flow simulated"), udp.expect("tunneled flow simulated"));
        if opts.capture {
            self.captured.append(&mut tcp.capture);
            self.captured.append(&mut udp.capture);
            self.captured.sort_by_key(|p| p.ts_us);
        }
        self.diagnostics.push(PairDiagnostics {
            source_port: src_port,
            tcp_max_wire_len: tcp.max_wire_len,
            udp_max_wire_len: udp.max_wire_len,
            tcp_mss: tcp.mss,
            udp_mss: udp.mss,
            wire_len_violations: udp.wire_len_violations,
            tcp_drops: tcp.drops.clone(),
            udp_drops: udp.drops.clone(),
        });
        PairOutcome {
            timestamps: PairTimestamps {
                tcp_start: unix_s(tcp.start_us),
                tcp_end: unix_s(tcp.end_us),
                udp_start: unix_s(udp.start_us),
                udp_end: unix_s(udp.end_us),
            },
            tcp: tcp.result,
            udp: udp.result,
        }
    }

    fn pause(&mut self, d: Duration) {
        self.path.advance_us(d.as_micros() as u64);
    }
}

/// Handshake times of a native and a tunneled connection started together
/// on a fresh path; `Err` when the handshake missed `timeout`.
pub fn emulated_handshakes(
    profile: &ImpairmentProfile,
    link: LinkModel,
    seed: u64,
    port: u16,
    timeout: Duration,
) -> Result<(Handshake, Handshake), PathLabError> {
    let mut path = Path::new(profile.clone(), link, seed);
    let opts = SimOptions { connect_timeout_us: timeout.as_micros() as u64, seed, ..SimOptions::default() };
    let src_port = 32_768 + (seed % 28_000) as u16;
    let setup = |kind| FlowSetup { kind, request: None, start_us: 0, src_port, dst_port: port };
    let flows = simulate(&mut path, &opts, &[setup(FlowKind::Tunneled), setup(FlowKind::Native)])?;
    let hs = |f: &SimFlow| match f.established_us {
        Some(t) => Ok(Duration::from_micros(t - f.start_us)),
        None => Err(format!("{:?} handshake timed out", f.kind).to_lowercase()),
    };
    Ok((hs(&flows[0]), hs(&flows[1])))
}

/// [`HandshakeRacer`] backed by the emulator: each handshake is simulated,
/// then the calling thread sleeps for the simulated time scaled by
/// `time_scale`.
pub struct EmulatedRacer {
    pub profile: ImpairmentProfile,
    pub link: LinkModel,
    pub seed: u64,
    pub time_scale: f64,
}

impl HandshakeRacer for EmulatedRacer {
    fn handshake(&self, transport: Transport, _destination: &str, port: u16, timeout: Duration) -> Result<(), String> {
        let (udp, tcp) =
            emulated_handshakes(&self.profile, self.link, self.seed, port, timeout).map_err(|e| e.to_string())?;
        let r = match transport {
            Transport::UdpTunneled => udp,
            Transport::NativeTcp => tcp,
        };
        let waited = match &r {
            Ok(d) => *d,
            Err(_) => timeout,
        };
        thread::sleep(waited.mul_f64(self.time_scale));
        r.map(drop)
    }
}

/// Expected initial RTT in ms of each protocol on the scenario's path.
pub fn expected_rtts(profile: &ImpairmentProfile, link: &LinkModel) -> (f64, f64) {
    let traversals = match profile.scope {
        Scope::Both => 2.0,
        Scope::Forward | Scope::Reverse => 1.0,
    };
    let base = 2.0 * link.one_way_delay_ms;
    (base + traversals * profile.extra_latency_tcp, base + traversals * profile.extra_latency_udp)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.3}"))
}

fn run_pairs(s: &Scenario, w: &PairWorkload, report: &mut HarnessReport) -> Result<(), PathLabError> {
    let path = Path::new(s.profile.clone(), s.path, s.seed);
    let options = SimOptions {
        connect_timeout_us: w.connect_timeout_ms * 1000,
        stall_timeout_us: w.stall_timeout_ms * 1000,
        seed: s.seed,
        ..SimOptions::default()
    };
    let mut driver = EmulatedPairDriver::new(path, options, s.seed);
    let config = CampaignConfig {
        source: SOURCE_NAME.into(),
        destinations: vec![SERVER_ADDR.to_string()],
        ports: w.ports.clone(),
        schedule: w.schedule.clone(),
        iw_segments: w.iw_segments,
        mss: DEFAULT_MSS,
        inter_pair_delay: Duration::from_millis(w.inter_pair_delay_ms),
        connect_timeout: Duration::from_millis(w.connect_timeout_ms),
        stall_timeout: Duration::from_millis(w.stall_timeout_ms),
        attempts_before_skip: w.attempts_before_skip,
    };
    let mut pairs: Vec<PairResult> = Vec::new();
    let summary =
        run_campaign(&config, &mut driver, &mut pairs, None).map_err(|e| PathLabError::Setup(e.to_string()))?;
    let bias = BiasSummary::from_pairs(&pairs);
    let checks = &mut report.checks;

    let both_ok: Vec<&PairDiagnostics> =
        pairs.iter().zip(&driver.diagnostics).filter(|(p, _)| p.tcp.success && p.udp.success).map(|(_, d)| d).collect();
    let unequal = both_ok.iter().filter(|d| d.tcp_max_wire_len != d.udp_max_wire_len).count();
    checks.push(Check::new(
        "max-wire-size-equal",
        unequal == 0,
        format!("{unequal} of {} completed pairs differ in largest packet size", both_ok.len()),
    ));
    let violations: u64 = driver.diagnostics.iter().map(|d| d.wire_len_violations).sum();
    checks.push(Check::new(
        "encapsulation-overhead",
        violations == 0,
        format!("{violations} tunneled packets not equal to inner + overhead"),
    ));

    let p = &s.profile;
    match (p.udp_block, p.tcp_block) {
        (true, false) => checks.push(Check::new(
            "udp-blocked",
            bias.conn_bias == Some(-1.0) && bias.classified_blocked,
            format!("conn_bias {}, classified blocked {}", fmt_opt(bias.conn_bias), bias.classified_blocked),
        )),
        (false, true) => checks.push(Check::new(
            "tcp-blocked",
            bias.conn_bias == Some(1.0),
            format!("conn_bias {}", fmt_opt(bias.conn_bias)),
        )),
        _ => {}
    }
    if p.is_neutral() {
        let ok = |v: Option<f64>| v.is_some_and(|x| x <= NEUTRAL_TOLERANCE_PCT);
        checks.push(Check::new(
            "neutral-parity",
            ok(bias.median_abs_tp_bias) && ok(bias.median_abs_rtt_bias) && bias.conn_bias == Some(0.0),
            format!(
                "median |tp_bias| {}, median |rtt_bias| {}, conn_bias {} (tolerance {NEUTRAL_TOLERANCE_PCT})",
                fmt_opt(bias.median_abs_tp_bias),
                fmt_opt(bias.median_abs_rtt_bias),
                fmt_opt(bias.conn_bias)
            ),
        ));
    }
    if p.udp_rate_limit.is_some() && p.tcp_rate_limit.is_none() && !p.udp_block {
        checks.push(Check::new(
            "udp-shaping-detected",
            // Beyond the spread a neutral path shows, not merely negative.
            bias.median_tp_bias.is_some_and(|b| b < -NEUTRAL_TOLERANCE_PCT),
            format!(
                "median tp_bias {} with UDP shaped to {} kB/s (TCP median {} kB/s)",
                fmt_opt(bias.median_tp_bias),
                fmt_opt(p.udp_rate_limit),
                fmt_opt(bias.median_tcp_throughput_kbps)
            ),
        ));
    }
    if p.extra_latency_udp != p.extra_latency_tcp && !p.udp_block && !p.tcp_block {
        let (tcp, udp) = expected_rtts(p, &s.path);
        let expected = (tcp - udp) / tcp.min(udp) * 100.0;
        checks.push(Check::new(
            "latency-skew-detected",
            bias.median_rtt_bias.is_some_and(|b| (b - expected).abs() <= LATENCY_TOLERANCE_PCT),
            format!(
                "median rtt_bias {} vs expected {expected:.3} (±{LATENCY_TOLERANCE_PCT})",
                fmt_opt(bias.median_rtt_bias)
            ),
        ));
    }
    report.pairs = pairs;
    report.pair_diagnostics = driver.diagnostics;
    report.campaign = Some(summary);
    report.bias = Some(bias);
    Ok(())
}

fn run_sweep(s: &Scenario, w: &SweepWorkload, report: &mut HarnessReport) -> Result<(), PathLabError> {
    let mut emulated = EmulatedProbePath::new(s.profile.clone(), SERVER_ADDR, w.hops, w.hop_delay_ms, s.seed);
    emulated.tcp_listening.insert(w.tcp_port);
    let mut prober = Prober::new(emulated, super::sim::CLIENT_ADDR);
    let target = IpAddr::V4(SERVER_ADDR);
    let fail = |e: crate::prober::ProberError| PathLabError::Setup(e.to_string());
    for protocol in [ProbeProtocol::Udp, ProbeProtocol::Tcp, ProbeProtocol::Icmp] {
        let spec = ProbeSpec {
            initial_ttl: w.ttl,
            attempts: w.attempts,
            port: match protocol {
                ProbeProtocol::Udp => w.udp_port,
                ProbeProtocol::Tcp => w.tcp_port,
                ProbeProtocol::Icmp => 0,
            },
            ..ProbeSpec::new(target, protocol)
        };
        report.probes.extend(prober.probe(&spec).map_err(fail)?);
    }
    let template = ProbeSpec {
        initial_ttl: w.ttl,
        attempts: w.attempts,
        port: w.udp_port,
        ..ProbeSpec::new(target, ProbeProtocol::Udp)
    };
    let sweep = prober.mtu_sweep(&template, &w.sizes);
    let oracle: HashSet<IpAddr> = [target].into();
    let blocked = classify_blocked_origin(&report.probes, &oracle).ok();

    let p = &s.profile;
    let checks = &mut report.checks;
    if usize::from(w.ttl) >= usize::from(w.hops) {
        let expired = report.probes.iter().filter(|r| r.outcome == ProbeOutcome::PathTtlExceeded).count();
        checks.push(Check::new(
            "no-path-ttl-exceeded",
            expired == 0,
            format!("{expired} time-exceeded responses with TTL {} over {} hops", w.ttl, w.hops),
        ));
    }
    if p.is_neutral() {
        let all = report.probes.iter().all(ProbeResult::succeeded) && sweep.rows.iter().all(|r| r.udp_ok && r.icmp_ok);
        checks.push(Check::new("all-protocols-reach-target", all, format!("{} probes", report.probes.len())));
    }
    if p.udp_block {
        checks.push(Check::new(
            "udp-fail-icmp-pass",
            sweep.udp_fail_icmp_pass,
            format!(
                "flagged sizes: {:?}",
                sweep.rows.iter().filter(|r| r.udp_fail_icmp_pass).map(|r| r.size).collect::<Vec<_>>()
            ),
        ));
    }
    checks.push(Check::new(
        "blocked-origin-matches-profile",
        blocked == Some(p.udp_block),
        format!("classified {blocked:?}, udp_block {}", p.udp_block),
    ));
    if let Some(threshold) = p.large_icmp_block_threshold {
        let largest = w.sizes.iter().max().copied().unwrap_or(0) + 28;
        let smallest = w.sizes.iter().min().copied().unwrap_or(0) + 28;
        if smallest <= threshold && largest > threshold && !p.udp_block {
            checks.push(Check::new(
                "large-icmp-asymmetry",
                sweep.large_icmp_asymmetry,
                format!("ICMP above {threshold} bytes dropped"),
            ));
        }
    }
    report.sweep = Some(sweep);
    report.udp_blocked_origin = blocked;
    Ok(())
}

fn run_race(s: &Scenario, w: &RaceWorkload, report: &mut HarnessReport) -> Result<(), PathLabError> {
    let timeout = Duration::from_millis(w.timeout_ms);
    let head_start = Duration::from_millis(w.head_start_ms);
    let ms = |h: &Handshake| h.as_ref().ok().map(|d| d.as_secs_f64() * 1000.0);
    for round in 0..w.rounds {
        let (udp, tcp) =
            emulated_handshakes(&s.profile, s.path, s.seed.wrapping_add(u64::from(round)), w.port, timeout)?;
        let decision = decide(&udp, &tcp, head_start);
        report.race.push(RaceRound {
            udp_handshake_ms: ms(&udp),
            tcp_handshake_ms: ms(&tcp),
            winner: decision.as_ref().ok().copied(),
            error: decision.err().map(|e| e.to_string()),
        });
    }
    if w.realtime {
        let racer = Arc::new(EmulatedRacer { profile: s.profile.clone(), link: s.path, seed: s.seed, time_scale: 1.0 });
        let r = race_connect(racer, &SERVER_ADDR.to_string(), w.port, timeout, head_start);
        report.race_connect = Some(r.map_err(|e| e.to_string()));
    }
    let expected = match (s.profile.udp_block, s.profile.tcp_block) {
        (true, false) => Some(Transport::NativeTcp),
        (false, _) if s.profile.is_neutral() => Some(Transport::UdpTunneled),
        (false, true) => Some(Transport::UdpTunneled),
        _ => None,
    };
    if let Some(want) = expected {
        let rounds_ok = report.race.iter().all(|r| r.winner == Some(want));
        let live_ok = report.race_connect.as_ref().is_none_or(|r| r.as_ref().ok() == Some(&want));
        let name = match want {
            Transport::NativeTcp => "race-selects-native-tcp",
            Transport::UdpTunneled => "race-selects-udp-tunneled",
        };
        report.checks.push(Check::new(
            name,
            rounds_ok && live_ok,
            format!(
                "rounds {:?}, race_connect {:?}",
                report.race.iter().map(|r| r.winner).collect::<Vec<_>>(),
                report.race_connect
            ),
        ));
    }
    Ok(())
}

fn nat_expected(timeout_s: Option<f64>, idle_s: f64) -> bool {
    timeout_s.is_none_or(|t| idle_s <= t)
}

fn run_nat(s: &Scenario, w: &NatWorkload, report: &mut HarnessReport) -> Result<(), PathLabError> {
    let mut state = PathState::new(s.seed);
    let mut clock_us: u64 = 0;
    const GAP_US: u64 = 10_000;
    let protocols = [Protocol::Udp, Protocol::Tcp];
    for (i, &idle) in w.idle_s.iter().enumerate() {
        let later = clock_us + GAP_US + (idle * 1e6).round() as u64;
        let mut last = [Decision::DeliverAt(0); 2];
        // Both protocols share the timeline so the middlebox clock only moves forward.
        for (direction, ts_us) in
            [(Direction::Forward, clock_us), (Direction::Reverse, clock_us + GAP_US), (Direction::Reverse, later)]
        {
            for (j, &protocol) in protocols.iter().enumerate() {
                let flow = (i * 2 + j) as u64 + 1;
                last[j] = transit(PacketMeta { protocol, size: 100, direction, ts_us, flow }, &s.profile, &mut state)?;
            }
        }
        for (j, &protocol) in protocols.iter().enumerate() {
            let (timeout, blocked) = match protocol {
                Protocol::Udp => (s.profile.nat_udp_idle_timeout, s.profile.udp_block),
                _ => (s.profile.nat_tcp_idle_timeout, s.profile.tcp_block),
            };
            report.nat.push(NatObservation {
                protocol,
                idle_s: idle,
                inbound_delivered: matches!(last[j], Decision::DeliverAt(_)),
                drop_reason: match last[j] {
                    Decision::Drop(r) => Some(r),
                    Decision::DeliverAt(_) => None,
                },
                expected_delivered: !blocked && nat_expected(timeout, idle),
            });
        }
        clock_us = later + GAP_US;
    }
    let mismatched = report.nat.iter().filter(|o| o.inbound_delivered != o.expected_delivered).count();
    report.checks.push(Check::new(
        "nat-matches-profile",
        mismatched == 0,
        format!("{mismatched} of {} inbound packets disagree with the idle timeouts", report.nat.len()),
    ));
    let p = &s.profile;
    if let (Some(u), Some(t)) = (p.nat_udp_idle_timeout, p.nat_tcp_idle_timeout) {
        if u < t {
            let asym: Vec<f64> = w
                .idle_s
                .iter()
                .copied()
                .filter(|&idle| {
                    let find = |proto| report.nat.iter().find(|o| o.protocol == proto && o.idle_s == idle);
                    let udp = find(Protocol::Udp).is_some_and(|o| o.drop_reason == Some(DropReason::NatExpired));
                    let tcp = find(Protocol::Tcp).is_some_and(|o| o.inbound_delivered);
                    udp && tcp
                })
                .collect();
            report.checks.push(Check::new(
                "nat-udp-expires-before-tcp",
                !asym.is_empty(),
                format!("idle gaps (s) where UDP expired and TCP survived: {asym:?}"),
            ));
        }
    }
    Ok(())
}

/// Validates, then runs the scenario's workload.
pub fn run_scenario(s: &Scenario) -> Result<HarnessReport, PathLabError> {
    s.validate()?;
    let mut report = HarnessReport::new(s);
    match &s.workload {
        Workload::Pairs(w) => run_pairs(s, w, &mut report)?,
        Workload::ProbeSweep(w) => run_sweep(s, w, &mut report)?,
        Workload::Race(w) => run_race(s, w, &mut report)?,
        Workload::NatIdle(w) => run_nat(s, w, &mut report)?,
    }
    Ok(report)
}

/// Median native-TCP throughput (kB/s) of a neutral run of `workload` on
/// `link`; the reference for sizing a shaper.
pub fn calibrate_tcp_throughput(link: LinkModel, workload: &PairWorkload, seed: u64) -> Result<f64, PathLabError> {
    let mut s = Scenario::new("calibration", ImpairmentProfile::neutral(), Workload::Pairs(workload.clone()));
    s.path = link;
    s.seed = seed;
    let report = run_scenario(&s)?;
    report
        .bias
        .and_then(|b| b.median_tcp_throughput_kbps)
        .ok_or_else(|| PathLabError::Setup("calibration run produced no TCP throughput".into()))
}

/// Scenarios shipped with the tool, runnable by name.
pub fn bundled() -> Vec<Scenario> {
    let pairs = PairWorkload::default();
    let mut out = Vec::new();
    let mut add = |name: &str, description: &str, profile: ImpairmentProfile, workload: Workload| {
        let mut s = Scenario::new(name, profile, workload);
        s.description = description.into();
        out.push(s);
    };
    add("neutral", "no impairment; biases should vanish", ImpairmentProfile::neutral(), Workload::Pairs(pairs.clone()));
    add(
        "udp-blackhole",
        "all UDP dropped at the access border",
        ImpairmentProfile { udp_block: true, ..Default::default() },
        Workload::Pairs(PairWorkload { schedule: vec![(1, 10)], ..pairs.clone() }),
    );
    add(
        "udp-rate-limit",
        "UDP shaped to 1000 kB/s, an arbitrary rate well below the link",
        ImpairmentProfile { udp_rate_limit: Some(1000.0), ..Default::default() },
        Workload::Pairs(PairWorkload { schedule: vec![(300, 5)], ..pairs.clone() }),
    );
    add(
        "udp-latency",
        "20 ms extra one-way delay on UDP toward the server",
        ImpairmentProfile { extra_latency_udp: 20.0, scope: Scope::Forward, ..Default::default() },
        Workload::Pairs(PairWorkload { schedule: vec![(1, 20)], ..pairs.clone() }),
    );
    add(
        "nat-timeouts",
        "NAT idle timeouts of 180 s for UDP and 3600 s for TCP",
        ImpairmentProfile {
            nat_udp_idle_timeout: Some(180.0),
            nat_tcp_idle_timeout: Some(3600.0),
            ..Default::default()
        },
        Workload::NatIdle(NatWorkload::default()),
    );
    add(
        "probe-neutral",
        "ping-mode probes over a clean 10-hop path",
        ImpairmentProfile::neutral(),
        Workload::ProbeSweep(SweepWorkload::default()),
    );
    add(
        "probe-udp-blocked",
        "ping-mode probes and size sweep from a UDP-blocked network",
        ImpairmentProfile { udp_block: true, ..Default::default() },
        Workload::ProbeSweep(SweepWorkload::default()),
    );
    add(
        "probe-large-icmp",
        "ICMP above 1000 bytes dropped",
        ImpairmentProfile { large_icmp_block_threshold: Some(1000), ..Default::default() },
        Workload::ProbeSweep(SweepWorkload::default()),
    );
    add(
        "race-udp-blackhole",
        "transport racing when UDP is dropped",
        ImpairmentProfile { udp_block: true, ..Default::default() },
        Workload::Race(RaceWorkload::default()),
    );
    add(
        "race-neutral",
        "transport racing on a clean path",
        ImpairmentProfile::neutral(),
        Workload::Race(RaceWorkload::default()),
    );
    out
}

pub fn bundled_scenario(name: &str) -> Option<Scenario> {
    bundled().into_iter().find(|s| s.name == name)
}
