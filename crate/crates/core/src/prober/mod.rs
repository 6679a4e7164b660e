//! Traceroute-style reachability probes: UDP, TCP SYN and ICMP echo sent
//! with a high initial TTL so they act as pings, packet-size sweeps, and
//! classification of UDP-blocked vantage points.

pub mod packet;
#[cfg(target_os = "linux")]
pub mod raw;

use std::collections::HashSet;
use std::io;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowpair::duration_ms;
use packet::{build_probe, build_rst, match_response, ProbeKey, Reply};

pub const DEFAULT_TTL: u8 = 199;
pub const DEFAULT_ATTEMPTS: u32 = 3;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);
pub const DEFAULT_UDP_PORT: u16 = 33_434;
pub const DEFAULT_TCP_PORT: u16 = 80;
pub const SWEEP_SIZES: [usize; 3] = [72, 572, 1454];
/// Daemon mode sends one round of attempts per interval.
pub const ROUND_INTERVAL: Duration = Duration::from_secs(20 * 60);

const FIRST_SOURCE_PORT: u16 = 33_000;
const SOURCE_PORT_SPAN: u16 = 28_000;

#[derive(Debug, Error)]
pub enum ProberError {
    #[error("invalid probe: {0}")]
    InvalidSpec(String),
    #[error("raw sockets need root or CAP_NET_RAW: {0}")]
    Privilege(String),
    #[error("no probed target is known to be reachable over UDP")]
    NoReachableTargets,
    #[error("target list line {line}: {reason}")]
    TargetList { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeProtocol {
    Udp,
    Tcp,
    Icmp,
}

impl ProbeProtocol {
    pub fn ip_number(self) -> u8 {
        match self {
            Self::Udp => 17,
            Self::Tcp => 6,
            Self::Icmp => 1,
        }
    }
}

impl std::str::FromStr for ProbeProtocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "udp" => Ok(Self::Udp),
            "tcp" => Ok(Self::Tcp),
            "icmp" => Ok(Self::Icmp),
            other => Err(format!("unknown protocol {other:?} (udp, tcp or icmp)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub target: IpAddr,
    pub protocol: ProbeProtocol,
    /// Destination port for UDP and TCP; ignored for ICMP.
    pub port: u16,
    /// Bytes after the transport header; SYN probes carry none.
    pub packet_size: usize,
    pub initial_ttl: u8,
    pub attempts: u32,
    #[serde(rename = "spacing_ms", with = "duration_ms")]
    pub spacing: Duration,
    #[serde(rename = "timeout_ms", with = "duration_ms")]
    pub timeout: Duration,
}

impl ProbeSpec {
    pub fn new(target: IpAddr, protocol: ProbeProtocol) -> Self {
        Self {
            target,
            protocol,
            port: match protocol {
                ProbeProtocol::Tcp => DEFAULT_TCP_PORT,
                _ => DEFAULT_UDP_PORT,
            },
            packet_size: 0,
            initial_ttl: DEFAULT_TTL,
            attempts: DEFAULT_ATTEMPTS,
            spacing: Duration::ZERO,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn validate(&self) -> Result<(), ProberError> {
        let bad = |m: &str| Err(ProberError::InvalidSpec(m.to_string()));
        if self.initial_ttl == 0 {
            return bad("initial_ttl must be within 1..=255");
        }
        if self.attempts == 0 {
            return bad("attempts must be positive");
        }
        if self.protocol == ProbeProtocol::Tcp && self.packet_size != 0 {
            return bad("TCP SYN probes carry no payload; packet_size must be 0");
        }
        if self.packet_size > 65_535 - 28 {
            return bad("packet_size exceeds an IPv4 datagram");
        }
        if self.protocol != ProbeProtocol::Icmp && self.port == 0 {
            return bad("port must be nonzero");
        }
        if !self.target.is_ipv4() {
            return bad("only IPv4 targets can be probed");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeOutcome {
    TargetResponse,
    PathTtlExceeded,
    UnreachableFromPath,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RawResponse {
    EchoReply,
    SynAck,
    Rst,
    Icmp { icmp_type: u8, code: u8 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    #[serde(flatten)]
    pub spec: ProbeSpec,
    /// Zero-based index within the spec's attempts.
    pub attempt: u32,
    pub outcome: ProbeOutcome,
    pub responder: Option<IpAddr>,
    pub rtt_ms: Option<f64>,
    pub response: Option<RawResponse>,
    /// Unix seconds when the probe left.
    pub sent_at: f64,
}

impl ProbeResult {
    pub fn succeeded(&self) -> bool {
        self.outcome == ProbeOutcome::TargetResponse
    }
}

/// Moves raw IPv4 packets for the prober: a raw socket on a live host or
/// an emulated path in the lab.
pub trait ProbeTransport {
    fn send(&mut self, packet: &[u8]) -> io::Result<()>;

    /// Next packet arriving within `wait` of the most recent send, with its
    /// delay after that send.
    fn recv(&mut self, wait: Duration) -> io::Result<Option<(Vec<u8>, Duration)>>;

    fn pause(&mut self, d: Duration) {
        thread::sleep(d);
    }

    fn unix_now(&self) -> f64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or_default()
    }
}

pub struct Prober<T> {
    transport: T,
    source: Ipv4Addr,
    next_id: u16,
}

fn classify(reply: &Reply, responder: Ipv4Addr, key: &ProbeKey) -> (ProbeOutcome, RawResponse) {
    match *reply {
        Reply::EchoReply => (ProbeOutcome::TargetResponse, RawResponse::EchoReply),
        Reply::TcpSynAck => (ProbeOutcome::TargetResponse, RawResponse::SynAck),
        Reply::TcpRst => (ProbeOutcome::TargetResponse, RawResponse::Rst),
        Reply::IcmpError { icmp_type, code } => {
            let raw = RawResponse::Icmp { icmp_type, code };
            let outcome = if icmp_type == packet::ICMP_TIME_EXCEEDED {
                ProbeOutcome::PathTtlExceeded
            } else if key.protocol == ProbeProtocol::Udp
                && responder == key.dst
                && code == packet::CODE_PORT_UNREACHABLE
            {
                ProbeOutcome::TargetResponse
            } else {
                ProbeOutcome::UnreachableFromPath
            };
            (outcome, raw)
        }
    }
}

impl<T: ProbeTransport> Prober<T> {
    /// `source` is the address probes carry and responses are sent to.
    pub fn new(transport: T, source: Ipv4Addr) -> Self {
        Self { transport, source, next_id: 1 }
    }

    pub fn transport(&mut self) -> &mut T {
        &mut self.transport
    }

    fn key_for(&mut self, spec: &ProbeSpec, dst: Ipv4Addr, attempt: u32) -> ProbeKey {
        let id = self.next_id;
        self.next_id = self.next_id.wrapping_add(1).max(1);
        let (sport, dport) = match spec.protocol {
            ProbeProtocol::Icmp => (id, attempt as u16),
            _ => (FIRST_SOURCE_PORT + id % SOURCE_PORT_SPAN, spec.port),
        };
        ProbeKey { protocol: spec.protocol, src: self.source, dst, sport, dport, seq: u32::from(id) << 16 | attempt }
    }

    /// Sends `spec.attempts` probes, one at a time, each waiting up to
    /// `spec.timeout` for a matching response.
    pub fn probe(&mut self, spec: &ProbeSpec) -> Result<Vec<ProbeResult>, ProberError> {
        spec.validate()?;
        let IpAddr::V4(dst) = spec.target else { unreachable!("validated as IPv4") };
        let mut results = Vec::with_capacity(spec.attempts as usize);
        for attempt in 0..spec.attempts {
            if attempt > 0 && !spec.spacing.is_zero() {
                self.transport.pause(spec.spacing);
            }
            let key = self.key_for(spec, dst, attempt);
            let sent_at = self.transport.unix_now();
            self.transport.send(&build_probe(&key, spec.initial_ttl, spec.packet_size))?;
            let mut result = ProbeResult {
                spec: spec.clone(),
                attempt,
                outcome: ProbeOutcome::Timeout,
                responder: None,
                rtt_ms: None,
                response: None,
                sent_at,
            };
            while let Some((bytes, delay)) = self.transport.recv(spec.timeout)? {
                if delay > spec.timeout {
                    break;
                }
                let Some((responder, reply)) = match_response(&bytes, &key) else {
                    continue;
                };
                let (outcome, raw) = classify(&reply, responder, &key);
                if reply == Reply::TcpSynAck {
                    self.transport.send(&build_rst(&key, spec.initial_ttl))?;
                }
                result.outcome = outcome;
                result.responder = Some(IpAddr::V4(responder));
                result.rtt_ms = Some(delay.as_secs_f64() * 1000.0);
                result.response = Some(raw);
                break;
            }
            results.push(result);
        }
        Ok(results)
    }

    /// UDP and ICMP probes of each size toward `template.target`; the
    /// template supplies TTL, attempts, timeout and the UDP port.
    pub fn mtu_sweep(&mut self, template: &ProbeSpec, sizes: &[usize]) -> MtuSweep {
        let mut rows = Vec::with_capacity(sizes.len());
        for &size in sizes {
            let mut row =
                SweepRow { size, udp_ok: false, icmp_ok: false, udp_fail_icmp_pass: false, errors: Vec::new() };
            for protocol in [ProbeProtocol::Udp, ProbeProtocol::Icmp] {
                let spec = ProbeSpec {
                    protocol,
                    packet_size: size,
                    port: if protocol == ProbeProtocol::Udp { template.port } else { 0 },
                    ..template.clone()
                };
                let ok = match self.probe(&spec) {
                    Ok(r) => r.iter().any(ProbeResult::succeeded),
                    Err(e) => {
                        row.errors.push(format!("{protocol:?}: {e}"));
                        false
                    }
                };
                match protocol {
                    ProbeProtocol::Udp => row.udp_ok = ok,
                    _ => row.icmp_ok = ok,
                }
            }
            row.udp_fail_icmp_pass = !row.udp_ok && row.icmp_ok;
            rows.push(row);
        }
        MtuSweep::from_rows(template.target, rows)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub udp_ok: bool,
    pub icmp_ok: bool,
    pub udp_fail_icmp_pass: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MtuSweep {
    pub target: IpAddr,
    pub rows: Vec<SweepRow>,
    /// Every size failed over UDP while ICMP of that size got through.
    pub udp_fail_icmp_pass: bool,
    /// Small ICMP passes, the largest ICMP fails, yet UDP of that size passes.
    pub large_icmp_asymmetry: bool,
}

impl MtuSweep {
    pub fn from_rows(target: IpAddr, rows: Vec<SweepRow>) -> Self {
        let all_flagged = !rows.is_empty() && rows.iter().all(|r| r.udp_fail_icmp_pass);
        let asymmetry = match (rows.iter().min_by_key(|r| r.size), rows.iter().max_by_key(|r| r.size)) {
            (Some(small), Some(large)) if small.size < large.size => small.icmp_ok && !large.icmp_ok && large.udp_ok,
            _ => false,
        };
        Self { target, rows, udp_fail_icmp_pass: all_flagged, large_icmp_asymmetry: asymmetry }
    }
}

/// An origin is on a UDP-blocked network when none of its UDP probes to
/// targets that others reach over UDP ever got through.
pub fn classify_blocked_origin(history: &[ProbeResult], udp_reachable: &HashSet<IpAddr>) -> Result<bool, ProberError> {
    let relevant: Vec<&ProbeResult> = history
        .iter()
        .filter(|r| r.spec.protocol == ProbeProtocol::Udp && udp_reachable.contains(&r.spec.target))
        .collect();
    if relevant.is_empty() {
        return Err(ProberError::NoReachableTargets);
    }
    Ok(!relevant.iter().any(|r| r.succeeded()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeTarget {
    pub addr: IpAddr,
    pub port: Option<u16>,
}

/// One `address[:port]` per line; IPv6 with a port goes in brackets,
/// `#` starts a comment.
pub fn parse_targets(text: &str) -> Result<Vec<ProbeTarget>, ProberError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let target = if let Ok(sa) = line.parse::<SocketAddr>() {
            ProbeTarget { addr: sa.ip(), port: Some(sa.port()) }
        } else if let Ok(ip) = line.trim_start_matches('[').trim_end_matches(']').parse::<IpAddr>() {
            ProbeTarget { addr: ip, port: None }
        } else {
            return Err(ProberError::TargetList { line: i + 1, reason: format!("{line:?} is not address[:port]") });
        };
        out.push(target);
    }
    Ok(out)
}
