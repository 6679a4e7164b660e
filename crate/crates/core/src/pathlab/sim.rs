//! Discrete-event emulation of TCP flows over one shared path.
//!
//! Each flow is a client that sends a 4-byte size request and a server that
//! answers with that many bytes, both running a NewReno sender with an
//! RFC 6298 retransmission timer. Native flows cross the path as TCP;
//! tunneled flows are serialized to real IPv4/TCP bytes, MSS-clamped and
//! encapsulated by the tunnel module, and cross the path as UDP.
//!
//! Path, in each direction: middlebox ([`transit`]) then a shared
//! rate-limited drop-tail link, then propagation delay.

use std::cmp::Ordering as CmpOrdering;
use std::collections::{BTreeMap, BinaryHeap};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};

use etherparse::{PacketBuilder, SlicedPacket, TcpOptionElement, TransportSlice};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::profile::ImpairmentProfile;
use super::transit::{transit, Decision, Direction, DropReason, PacketMeta, PathState, Protocol};
use super::PathLabError;
use crate::flowpair::{FailureReason, FlowResult};
use crate::metrics::capture::CapturedPacket;
use crate::metrics::{self, CaptureDirection, PacketRecord, TcpFlags};
use crate::tunnel::{decapsulate, encapsulate, rewrite_syn_mss, syn_mss, TunnelConfig};

pub const CLIENT_ADDR: Ipv4Addr = Ipv4Addr::new(192, 0, 2, 10);
pub const SERVER_ADDR: Ipv4Addr = Ipv4Addr::new(198, 51, 100, 20);

const INITIAL_RTO_US: u64 = 1_000_000;
const RTO_AFTER_HANDSHAKE_LOSS_US: u64 = 3_000_000;
const MIN_RTO_US: u64 = 200_000;
const MAX_RTO_US: u64 = 60_000_000;
const CLOCK_GRANULARITY_US: f64 = 1_000.0;
const DEFAULT_MSS_WITHOUT_OPTION: u16 = 536;
const REQUEST_LEN: u64 = 4;

/// Bottleneck shared by all flows; identical in both directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub rate_mbps: f64,
    pub one_way_delay_ms: f64,
    pub buffer_bytes: usize,
}

impl LinkModel {
    fn bytes_per_us(&self) -> f64 {
        self.rate_mbps / 8.0
    }
}

/// One emulated path: middlebox state, link queues and the virtual clock.
pub struct Path {
    pub profile: ImpairmentProfile,
    pub link: LinkModel,
    pub state: PathState,
    link_free_us: [u64; 2],
    clock_us: u64,
}

impl Path {
    pub fn new(profile: ImpairmentProfile, link: LinkModel, seed: u64) -> Self {
        Self { profile, link, state: PathState::new(seed), link_free_us: [0; 2], clock_us: 0 }
    }

    pub fn now_us(&self) -> u64 {
        self.clock_us
    }

    pub fn advance_us(&mut self, by: u64) {
        self.clock_us += by;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Native,
    Tunneled,
}

#[derive(Debug, Clone)]
pub struct FlowSetup {
    pub kind: FlowKind,
    /// Payload to request; `None` stops the flow once the handshake is done.
    pub request: Option<u32>,
    pub start_us: u64,
    pub src_port: u16,
    pub dst_port: u16,
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    /// MSS both hosts derive from their 1500-byte interfaces.
    pub native_mss: u16,
    pub interface_mtu: usize,
    pub iw_segments: u32,
    pub connect_timeout_us: u64,
    pub stall_timeout_us: u64,
    /// Keep client-side wire bytes of every packet.
    pub capture: bool,
    pub seed: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            native_mss: 1460,
            interface_mtu: 1500,
            iw_segments: crate::flowpair::DEFAULT_IW_SEGMENTS,
            connect_timeout_us: 10_000_000,
            stall_timeout_us: 30_000_000,
            capture: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FourTuple {
    pub src: SocketAddr,
    pub dst: SocketAddr,
}

/// Everything observed about one emulated flow.
#[derive(Debug, Clone)]
pub struct SimFlow {
    pub kind: FlowKind,
    pub result: FlowResult,
    pub start_us: u64,
    pub end_us: u64,
    /// Client-side handshake completion.
    pub established_us: Option<u64>,
    pub client_trace: Vec<PacketRecord>,
    pub server_trace: Vec<PacketRecord>,
    /// Largest packet this flow put on the wire.
    pub max_wire_len: usize,
    /// Tunneled packets whose outer size was not inner + overhead.
    pub wire_len_violations: u64,
    /// MSS the client ended up using.
    pub mss: Option<u16>,
    pub inner_tuple: FourTuple,
    pub wire_tuple: FourTuple,
    pub capture: Vec<CapturedPacket>,
    pub drops: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Client = 0,
    Server = 1,
}

impl Side {
    fn peer(self) -> Side {
        match self {
            Side::Client => Side::Server,
            Side::Server => Side::Client,
        }
    }
}

#[derive(Debug, Clone)]
struct Segment {
    seq: u32,
    ack: u32,
    flags: u8,
    payload: u32,
    mss: Option<u16>,
    /// Up to three SACK blocks, wire sequence numbers.
    sack: Vec<(u32, u32)>,
}

impl Segment {
    fn has(&self, f: u8) -> bool {
        self.flags & f != 0
    }
}

/// Adds `[start, end)` to a set of disjoint ranges, merging neighbors.
/// Returns the start of the range now holding it.
fn insert_range(ranges: &mut BTreeMap<u64, u64>, start: u64, end: u64) -> u64 {
    let (mut s, mut e) = (start, end);
    if let Some((&ps, &pe)) = ranges.range(..=s).next_back() {
        if pe >= s {
            s = ps;
            e = e.max(pe);
            ranges.remove(&ps);
        }
    }
    while let Some((&ns, &ne)) = ranges.range(s..).next() {
        if ns > e {
            break;
        }
        e = e.max(ne);
        ranges.remove(&ns);
    }
    ranges.insert(s, e);
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Listen,
    SynSent,
    SynRcvd,
    Established,
}

/// One TCP endpoint. Sequence numbers are kept relative to the ISNs: the
/// SYN is 0, data starts at 1.
#[derive(Debug)]
struct Tcb {
    isn: u32,
    peer_isn: u32,
    own_mss: u16,
    mss: u64,
    iw_segments: u32,
    state: State,
    send_ready: bool,
    send_len: u64,
    fin: bool,
    snd_una: u64,
    snd_nxt: u64,
    snd_max: u64,
    cwnd: u64,
    ssthresh: u64,
    dupacks: u32,
    recover: u64,
    in_recovery: bool,
    /// Ranges the peer reported via SACK, relative sequence numbers.
    sacked: BTreeMap<u64, u64>,
    /// Retransmissions during recovery have covered everything below this.
    high_rxt: u64,
    srtt: Option<f64>,
    rttvar: f64,
    rto_us: u64,
    rtt_probe: Option<(u64, u64)>,
    ctl_sent_us: u64,
    ctl_retransmitted: bool,
    timer_gen: u64,
    timer_armed: bool,
    pending_timer: Option<(u64, u64)>,
    rcv_nxt: u64,
    ooo: BTreeMap<u64, u64>,
    last_ooo: Option<u64>,
}

impl Tcb {
    fn new(isn: u32, own_mss: u16, iw_segments: u32, state: State) -> Self {
        Self {
            isn,
            peer_isn: 0,
            own_mss,
            mss: u64::from(own_mss),
            iw_segments,
            state,
            send_ready: false,
            send_len: 0,
            fin: false,
            snd_una: 0,
            snd_nxt: 0,
            snd_max: 0,
            cwnd: 0,
            ssthresh: u64::MAX,
            dupacks: 0,
            recover: 0,
            in_recovery: false,
            sacked: BTreeMap::new(),
            high_rxt: 0,
            srtt: None,
            rttvar: 0.0,
            rto_us: INITIAL_RTO_US,
            rtt_probe: None,
            ctl_sent_us: 0,
            ctl_retransmitted: false,
            timer_gen: 0,
            timer_armed: false,
            pending_timer: None,
            rcv_nxt: 0,
            ooo: BTreeMap::new(),
            last_ooo: None,
        }
    }

    fn data_end(&self) -> u64 {
        1 + self.send_len
    }

    fn limit(&self) -> u64 {
        self.data_end() + u64::from(self.fin)
    }

    fn wire_seq(&self, rel: u64) -> u32 {
        self.isn.wrapping_add(rel as u32)
    }

    fn arm(&mut self, now: u64) {
        self.timer_gen += 1;
        self.timer_armed = true;
        self.pending_timer = Some((now + self.rto_us, self.timer_gen));
    }

    fn cancel(&mut self) {
        self.timer_gen += 1;
        self.timer_armed = false;
    }

    fn rtt_sample(&mut self, r_us: u64) {
        let r = r_us as f64;
        match self.srtt {
            None => {
                self.srtt = Some(r);
                self.rttvar = r / 2.0;
            }
            Some(s) => {
                self.rttvar = 0.75 * self.rttvar + 0.25 * (s - r).abs();
                self.srtt = Some(0.875 * s + 0.125 * r);
            }
        }
        let rto = self.srtt.unwrap() + (4.0 * self.rttvar).max(CLOCK_GRANULARITY_US);
        self.rto_us = (rto as u64).clamp(MIN_RTO_US, MAX_RTO_US);
    }

    fn syn(&self) -> Segment {
        Segment { seq: self.isn, ack: 0, flags: TcpFlags::SYN, payload: 0, mss: Some(self.own_mss), sack: Vec::new() }
    }

    fn syn_ack(&self) -> Segment {
        Segment {
            seq: self.isn,
            ack: self.peer_isn.wrapping_add(self.rcv_nxt as u32),
            flags: TcpFlags::SYN | TcpFlags::ACK,
            payload: 0,
            mss: Some(self.own_mss),
            sack: Vec::new(),
        }
    }

    fn pure_ack(&self) -> Segment {
        Segment {
            seq: self.wire_seq(self.snd_nxt),
            ack: self.peer_isn.wrapping_add(self.rcv_nxt as u32),
            flags: TcpFlags::ACK,
            payload: 0,
            mss: None,
            sack: self.sack_blocks(),
        }
    }

    /// Segment starting at `rel` and its sequence-space length.
    fn segment_at(&self, rel: u64) -> (Segment, u64) {
        let end = self.data_end();
        let payload = if rel < end { self.mss.min(end - rel) } else { 0 };
        let fin = self.fin && rel + payload == end;
        let mut flags = TcpFlags::ACK;
        if payload > 0 {
            flags |= TcpFlags::PSH;
        }
        if fin {
            flags |= TcpFlags::FIN;
        }
        let seg = Segment {
            seq: self.wire_seq(rel),
            ack: self.peer_isn.wrapping_add(self.rcv_nxt as u32),
            flags,
            payload: payload as u32,
            mss: None,
            sack: Vec::new(),
        };
        (seg, payload + u64::from(fin))
    }

    fn become_established(&mut self, now: u64) {
        if self.ctl_retransmitted {
            self.rto_us = RTO_AFTER_HANDSHAKE_LOSS_US;
        } else {
            self.rtt_sample(now - self.ctl_sent_us);
        }
        let iw = u64::from(self.iw_segments) * self.mss;
        self.cwnd = if self.ctl_retransmitted { self.mss } else { iw };
        self.state = State::Established;
        self.snd_una = 1;
        self.snd_nxt = 1;
        self.snd_max = 1;
        self.cancel();
    }

    fn sack_blocks(&self) -> Vec<(u32, u32)> {
        let wire = |(s, e): (u64, u64)| (self.peer_isn.wrapping_add(s as u32), self.peer_isn.wrapping_add(e as u32));
        let mut blocks = Vec::with_capacity(3);
        let recent = self.last_ooo.and_then(|s| self.ooo.get(&s).map(|&e| (s, e)));
        if let Some(r) = recent {
            blocks.push(wire(r));
        }
        for (&s, &e) in &self.ooo {
            if blocks.len() == 3 {
                break;
            }
            if Some((s, e)) != recent {
                blocks.push(wire((s, e)));
            }
        }
        blocks
    }

    fn sacked_bytes(&self) -> u64 {
        self.sacked.values().zip(self.sacked.keys()).map(|(e, s)| e - s).sum()
    }

    /// First unsacked range at or after `from` lying below the highest
    /// sacked byte.
    fn next_hole(&self, from: u64) -> Option<(u64, u64)> {
        let mut p = from;
        if let Some((_, &e)) = self.sacked.range(..=p).next_back() {
            p = p.max(e);
        }
        self.sacked.range(p..).next().map(|(&s, _)| (p, s))
    }

    /// Bytes believed to be in the network during recovery: outstanding,
    /// minus sacked, minus holes not yet retransmitted.
    fn pipe(&self) -> u64 {
        let mut lost = 0;
        let mut p = self.high_rxt.max(self.snd_una);
        for (&s, &e) in &self.sacked {
            if e <= p {
                continue;
            }
            if s > p {
                lost += s - p;
            }
            p = e;
        }
        (self.snd_max - self.snd_una).saturating_sub(self.sacked_bytes() + lost)
    }

    fn send_new(&mut self, now: u64, out: &mut Vec<Segment>) -> u64 {
        let (seg, len) = self.segment_at(self.snd_nxt);
        if self.snd_nxt >= self.snd_max {
            if self.rtt_probe.is_none() {
                self.rtt_probe = Some((self.snd_nxt + len, now));
            }
            self.snd_max = self.snd_nxt + len;
        }
        self.snd_nxt += len;
        out.push(seg);
        len
    }

    fn send_loop(&mut self, now: u64, out: &mut Vec<Segment>) {
        if !self.send_ready || self.state != State::Established {
            return;
        }
        if self.in_recovery {
            self.recovery_send(now, out);
        } else {
            while self.snd_nxt < self.limit() {
                // A piggybacked FIN does not need window space.
                let (seg, _) = self.segment_at(self.snd_nxt);
                let flight = self.snd_nxt - self.snd_una;
                if flight > 0 && flight + u64::from(seg.payload) > self.cwnd {
                    break;
                }
                self.send_new(now, out);
            }
        }
        if !self.timer_armed && self.snd_una < self.snd_max {
            self.arm(now);
        }
    }

    /// Fills the window with hole retransmissions first, then new data.
    fn recovery_send(&mut self, now: u64, out: &mut Vec<Segment>) {
        let mut pipe = self.pipe();
        loop {
            if pipe + self.mss > self.cwnd {
                break;
            }
            if let Some((s, _)) = self.next_hole(self.high_rxt.max(self.snd_una)) {
                let (seg, len) = self.segment_at(s);
                self.high_rxt = s + len;
                self.rtt_probe = None;
                out.push(seg);
                pipe += len;
            } else if self.snd_nxt < self.limit() {
                pipe += self.send_new(now, out);
            } else {
                break;
            }
        }
    }

    fn enter_recovery(&mut self, out: &mut Vec<Segment>) {
        let flight = self.snd_max - self.snd_una;
        self.ssthresh = (flight / 2).max(2 * self.mss);
        self.cwnd = self.ssthresh;
        self.recover = self.snd_max;
        self.in_recovery = true;
        let (seg, len) = self.segment_at(self.snd_una);
        self.high_rxt = self.snd_una + len;
        self.rtt_probe = None;
        out.push(seg);
    }

    fn on_ack(&mut self, now: u64, seg: &Segment, carries_data: bool, out: &mut Vec<Segment>) {
        let a = u64::from(seg.ack.wrapping_sub(self.isn));
        if a > self.snd_max {
            return;
        }
        for &(l, r) in &seg.sack {
            let l = u64::from(l.wrapping_sub(self.isn)).max(a);
            let r = u64::from(r.wrapping_sub(self.isn));
            if l < r && r <= self.snd_max {
                insert_range(&mut self.sacked, l, r);
            }
        }
        if a > self.snd_una {
            let acked = a - self.snd_una;
            self.snd_una = a;
            self.snd_nxt = self.snd_nxt.max(a);
            while let Some((&s, &e)) = self.sacked.first_key_value() {
                if s >= a {
                    break;
                }
                self.sacked.remove(&s);
                if e > a {
                    self.sacked.insert(a, e);
                }
            }
            if let Some((end, sent)) = self.rtt_probe {
                if a >= end {
                    self.rtt_sample(now - sent);
                    self.rtt_probe = None;
                }
            }
            if self.in_recovery {
                if a >= self.recover {
                    self.in_recovery = false;
                    self.cwnd = self.ssthresh;
                }
            } else if self.cwnd < self.ssthresh {
                self.cwnd += acked.min(self.mss);
            } else {
                self.cwnd += (self.mss * self.mss / self.cwnd).max(1);
            }
            self.dupacks = 0;
            if self.snd_una >= self.snd_max {
                self.cancel();
            } else {
                self.arm(now);
            }
        } else if a == self.snd_una && !carries_data && self.snd_max > self.snd_una {
            self.dupacks += 1;
        }
        let loss_evident = self.dupacks >= 3 || self.sacked_bytes() >= 3 * self.mss;
        if !self.in_recovery && self.snd_una < self.snd_max && a >= self.recover && loss_evident {
            self.enter_recovery(out);
        }
    }

    /// Returns true when in-order data advanced.
    fn on_data(&mut self, seg: &Segment, out: &mut Vec<Segment>) -> bool {
        let len = u64::from(seg.payload) + u64::from(seg.has(TcpFlags::FIN));
        if len == 0 {
            return false;
        }
        let start = u64::from(seg.seq.wrapping_sub(self.peer_isn));
        let end = start + len;
        let before = self.rcv_nxt;
        if start <= self.rcv_nxt {
            self.rcv_nxt = self.rcv_nxt.max(end);
            while let Some((&s, &e)) = self.ooo.first_key_value() {
                if s > self.rcv_nxt {
                    break;
                }
                self.rcv_nxt = self.rcv_nxt.max(e);
                self.ooo.remove(&s);
            }
        } else {
            self.last_ooo = Some(insert_range(&mut self.ooo, start, end));
        }
        out.push(self.pure_ack());
        self.rcv_nxt > before
    }

    fn on_segment(&mut self, now: u64, seg: &Segment, out: &mut Vec<Segment>) {
        let syn = seg.has(TcpFlags::SYN);
        let ack = seg.has(TcpFlags::ACK);
        if seg.has(TcpFlags::RST) {
            return;
        }
        match self.state {
            State::Listen => {
                if syn && !ack {
                    self.peer_isn = seg.seq;
                    self.rcv_nxt = 1;
                    self.mss = u64::from(self.own_mss.min(seg.mss.unwrap_or(DEFAULT_MSS_WITHOUT_OPTION)));
                    self.state = State::SynRcvd;
                    self.ctl_sent_us = now;
                    out.push(self.syn_ack());
                    self.arm(now);
                }
            }
            State::SynSent => {
                if syn && ack && seg.ack == self.isn.wrapping_add(1) {
                    self.peer_isn = seg.seq;
                    self.rcv_nxt = 1;
                    self.mss = u64::from(self.own_mss.min(seg.mss.unwrap_or(DEFAULT_MSS_WITHOUT_OPTION)));
                    self.become_established(now);
                    let before = out.len();
                    self.send_loop(now, out);
                    if out.len() == before {
                        out.push(self.pure_ack());
                    }
                }
            }
            State::SynRcvd => {
                if syn && !ack {
                    out.push(self.syn_ack());
                } else if ack && seg.ack.wrapping_sub(self.isn) >= 1 {
                    self.become_established(now);
                    self.on_established(now, seg, out);
                }
            }
            State::Established => {
                if syn {
                    out.push(self.pure_ack());
                } else {
                    self.on_established(now, seg, out);
                }
            }
        }
    }

    fn on_established(&mut self, now: u64, seg: &Segment, out: &mut Vec<Segment>) {
        let carries = seg.payload > 0 || seg.has(TcpFlags::FIN);
        if seg.has(TcpFlags::ACK) {
            self.on_ack(now, seg, carries, out);
        }
        self.on_data(seg, out);
        self.send_loop(now, out);
    }

    fn on_timeout(&mut self, now: u64, out: &mut Vec<Segment>) {
        self.timer_armed = false;
        match self.state {
            State::Listen => {}
            State::SynSent | State::SynRcvd => {
                out.push(if self.state == State::SynSent { self.syn() } else { self.syn_ack() });
                self.ctl_retransmitted = true;
                self.rto_us = (self.rto_us * 2).min(MAX_RTO_US);
                self.arm(now);
            }
            State::Established => {
                if self.snd_una >= self.snd_max {
                    return;
                }
                let flight = self.snd_max - self.snd_una;
                self.ssthresh = (flight / 2).max(2 * self.mss);
                self.cwnd = self.mss;
                self.recover = self.snd_max;
                self.in_recovery = false;
                self.sacked.clear();
                self.dupacks = 0;
                self.snd_nxt = self.snd_una;
                self.rtt_probe = None;
                self.rto_us = (self.rto_us * 2).min(MAX_RTO_US);
                self.send_loop(now, out);
            }
        }
    }
}

#[derive(Debug)]
struct Wire {
    flow: usize,
    from: Side,
    size: usize,
    seg: Segment,
    outer: Option<crate::tunnel::OuterDatagram>,
}

#[derive(Debug)]
enum Event {
    Start(usize),
    LinkArrive(Box<Wire>),
    Deliver(Box<Wire>),
    Timer { flow: usize, side: Side, gen: u64 },
    ConnectDeadline(usize),
    StallCheck(usize),
}

struct Scheduled {
    at: u64,
    order: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.order) == (other.at, other.order)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        (other.at, other.order).cmp(&(self.at, self.order))
    }
}

struct FlowState {
    setup: FlowSetup,
    tcb: [Tcb; 2],
    tunnel: Option<[TunnelConfig; 2]>,
    done: bool,
    out: SimFlow,
    syn_sent_us: u64,
    last_progress_us: u64,
}

struct Sim<'a> {
    path: &'a mut Path,
    opts: &'a SimOptions,
    flows: Vec<FlowState>,
    queue: BinaryHeap<Scheduled>,
    order: u64,
}

fn endpoint(ip: Ipv4Addr, port: u16) -> SocketAddr {
    SocketAddr::new(IpAddr::V4(ip), port)
}

fn drop_label(reason: Option<DropReason>) -> String {
    match reason {
        Some(r) => serde_json::to_value(r).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
        None => "queue".into(),
    }
}

fn build_tcp(src: SocketAddr, dst: SocketAddr, seg: &Segment) -> Vec<u8> {
    let (IpAddr::V4(s), IpAddr::V4(d)) = (src.ip(), dst.ip()) else { unreachable!("emulated hosts are IPv4") };
    let mut b = PacketBuilder::ipv4(s.octets(), d.octets(), 64).tcp(src.port(), dst.port(), seg.seq, 65_535);
    if seg.has(TcpFlags::SYN) {
        b = b.syn();
    }
    if seg.has(TcpFlags::ACK) {
        b = b.ack(seg.ack);
    }
    if seg.has(TcpFlags::FIN) {
        b = b.fin();
    }
    if seg.has(TcpFlags::PSH) {
        b = b.psh();
    }
    if let Some(mss) = seg.mss {
        b = b.options(&[TcpOptionElement::MaximumSegmentSize(mss)]).expect("a lone MSS option always fits");
    } else if let Some((&first, rest)) = seg.sack.split_first() {
        let mut more = [None; 3];
        for (slot, &block) in more.iter_mut().zip(rest) {
            *slot = Some(block);
        }
        b = b
            .options(&[TcpOptionElement::SelectiveAcknowledgement(first, more)])
            .expect("three SACK blocks always fit");
    }
    let payload = vec![0u8; seg.payload as usize];
    let mut out = Vec::with_capacity(60 + payload.len());
    b.write(&mut out, &payload).expect("writing to a Vec cannot fail");
    out
}

fn parse_tcp(bytes: &[u8]) -> Option<Segment> {
    let sliced = SlicedPacket::from_ip(bytes).ok()?;
    let TransportSlice::Tcp(t) = sliced.transport? else {
        return None;
    };
    let flags = u8::from(t.fin())
        | u8::from(t.syn()) << 1
        | u8::from(t.rst()) << 2
        | u8::from(t.psh()) << 3
        | u8::from(t.ack()) << 4;
    let mut sack = Vec::new();
    for opt in t.options_iterator().flatten() {
        if let TcpOptionElement::SelectiveAcknowledgement(first, more) = opt {
            sack.push(first);
            sack.extend(more.into_iter().flatten());
        }
    }
    Some(Segment {
        seq: t.sequence_number(),
        ack: t.acknowledgment_number(),
        flags,
        payload: t.payload().len() as u32,
        mss: syn_mss(bytes),
        sack,
    })
}

fn native_len(seg: &Segment) -> usize {
    let options = if seg.mss.is_some() {
        4
    } else if seg.sack.is_empty() {
        0
    } else {
        (2 + 8 * seg.sack.len()).next_multiple_of(4)
    };
    40 + options + seg.payload as usize
}

impl Sim<'_> {
    fn schedule(&mut self, at: u64, event: Event) {
        self.order += 1;
        self.queue.push(Scheduled { at, order: self.order, event });
    }

    fn record(&mut self, f: usize, side: Side, dir: CaptureDirection, now: u64, seg: &Segment) {
        let rec = PacketRecord {
            ts_us: now,
            direction: dir,
            seq: seg.seq,
            payload_len: seg.payload,
            flags: TcpFlags(seg.flags),
        };
        let out = &mut self.flows[f].out;
        match side {
            Side::Client => out.client_trace.push(rec),
            Side::Server => out.server_trace.push(rec),
        }
    }

    fn emit(&mut self, now: u64, f: usize, from: Side, seg: Segment) -> Result<(), PathLabError> {
        self.record(f, from, CaptureDirection::Sent, now, &seg);
        let flow = &mut self.flows[f];
        let (src, dst) = match from {
            Side::Client => (flow.out.inner_tuple.src, flow.out.inner_tuple.dst),
            Side::Server => (flow.out.inner_tuple.dst, flow.out.inner_tuple.src),
        };
        let (size, outer, protocol) = match &flow.tunnel {
            Some(cfgs) => {
                let cfg = &cfgs[from as usize];
                let mut inner = build_tcp(src, dst, &seg);
                rewrite_syn_mss(&mut inner, cfg.clamped_mss()).map_err(|e| PathLabError::Emulation(e.to_string()))?;
                let d = encapsulate(&inner, cfg).map_err(|e| PathLabError::Emulation(e.to_string()))?;
                if d.wire_len() != inner.len() + cfg.encap_overhead() {
                    flow.out.wire_len_violations += 1;
                }
                if self.opts.capture && from == Side::Client {
                    flow.out.capture.push(CapturedPacket { ts_us: now, data: d.to_wire_bytes() });
                }
                (d.wire_len(), Some(d), Protocol::Udp)
            }
            None => {
                if self.opts.capture && from == Side::Client {
                    flow.out.capture.push(CapturedPacket { ts_us: now, data: build_tcp(src, dst, &seg) });
                }
                (native_len(&seg), None, Protocol::Tcp)
            }
        };
        flow.out.max_wire_len = flow.out.max_wire_len.max(size);
        let key = u64::from(flow.setup.src_port) << 16 | u64::from(flow.setup.dst_port);
        let meta = PacketMeta {
            protocol,
            size,
            direction: if from == Side::Client { Direction::Forward } else { Direction::Reverse },
            ts_us: now,
            flow: key,
        };
        match transit(meta, &self.path.profile, &mut self.path.state)? {
            Decision::Drop(reason) => {
                *self.flows[f].out.drops.entry(drop_label(Some(reason))).or_default() += 1;
            }
            Decision::DeliverAt(at) => {
                let wire = Wire { flow: f, from, size, seg, outer };
                self.schedule(at, Event::LinkArrive(Box::new(wire)));
            }
        }
        Ok(())
    }

    fn flush(&mut self, now: u64, f: usize, side: Side, out: Vec<Segment>) -> Result<(), PathLabError> {
        if let Some((at, gen)) = self.flows[f].tcb[side as usize].pending_timer.take() {
            self.schedule(at, Event::Timer { flow: f, side, gen });
        }
        for seg in out {
            self.emit(now, f, side, seg)?;
        }
        Ok(())
    }

    fn link_arrive(&mut self, now: u64, wire: Box<Wire>) {
        let d = wire.from as usize;
        let rate = self.path.link.bytes_per_us();
        let backlog = self.path.link_free_us[d].saturating_sub(now) as f64 * rate;
        if backlog + wire.size as f64 > self.path.link.buffer_bytes as f64 {
            *self.flows[wire.flow].out.drops.entry(drop_label(None)).or_default() += 1;
            return;
        }
        let start = self.path.link_free_us[d].max(now);
        let done = start + (wire.size as f64 / rate).ceil() as u64;
        self.path.link_free_us[d] = done;
        let arrive = done + (self.path.link.one_way_delay_ms * 1000.0).round() as u64;
        self.schedule(arrive, Event::Deliver(wire));
    }

    fn finish(&mut self, now: u64, f: usize, failure: Option<FailureReason>) {
        let flow = &mut self.flows[f];
        if flow.done {
            return;
        }
        flow.done = true;
        flow.out.end_us = now;
        let duration = (now - flow.syn_sent_us) as f64 / 1e6;
        let rtt = metrics::initial_rtt(&flow.out.client_trace).ok();
        let client = &flow.tcb[Side::Client as usize];
        flow.out.mss = (client.state == State::Established).then_some(client.mss as u16);
        flow.out.result = match failure {
            None => {
                let bytes = u64::from(flow.setup.request.unwrap_or(0));
                let loss = metrics::loss_pct(&flow.out.server_trace).ok();
                FlowResult::succeeded(bytes, duration, rtt.unwrap_or_default(), loss)
            }
            Some(reason) => {
                let got = client.rcv_nxt.saturating_sub(1);
                FlowResult::failed(reason, got, duration, rtt)
            }
        };
    }

    fn deliver(&mut self, now: u64, wire: Box<Wire>) -> Result<(), PathLabError> {
        let f = wire.flow;
        let to = wire.from.peer();
        let seg = match (&wire.outer, &self.flows[f].tunnel) {
            (Some(d), Some(cfgs)) => {
                let cfg = &cfgs[to as usize];
                let Ok(inner) = decapsulate(d, cfg) else {
                    *self.flows[f].out.drops.entry("decap".into()).or_default() += 1;
                    return Ok(());
                };
                let mut bytes = inner.into_bytes();
                rewrite_syn_mss(&mut bytes, cfg.clamped_mss()).map_err(|e| PathLabError::Emulation(e.to_string()))?;
                if self.opts.capture && to == Side::Client {
                    self.flows[f].out.capture.push(CapturedPacket { ts_us: now, data: d.to_wire_bytes() });
                }
                parse_tcp(&bytes)
                    .ok_or_else(|| PathLabError::Emulation("tunneled packet lost its TCP header".into()))?
            }
            _ => {
                if self.opts.capture && to == Side::Client {
                    let t = self.flows[f].out.inner_tuple;
                    self.flows[f]
                        .out
                        .capture
                        .push(CapturedPacket { ts_us: now, data: build_tcp(t.dst, t.src, &wire.seg) });
                }
                wire.seg
            }
        };
        if to == Side::Client {
            self.record(f, to, CaptureDirection::Received, now, &seg);
        }
        if self.flows[f].done {
            return Ok(());
        }
        let mut out = Vec::new();
        let flow = &mut self.flows[f];
        let tcb = &mut flow.tcb[to as usize];
        let was_established = tcb.state == State::Established;
        let before = tcb.rcv_nxt;
        tcb.on_segment(now, &seg, &mut out);
        let established_now = !was_established && tcb.state == State::Established;
        let progressed = tcb.rcv_nxt > before;
        let rcv_nxt = tcb.rcv_nxt;
        match to {
            Side::Server => {
                if !tcb.send_ready && tcb.state == State::Established && rcv_nxt > REQUEST_LEN {
                    tcb.send_len = u64::from(flow.setup.request.unwrap_or(0));
                    tcb.fin = true;
                    tcb.send_ready = true;
                    tcb.send_loop(now, &mut out);
                }
                self.flush(now, f, to, out)?;
            }
            Side::Client => {
                if established_now {
                    flow.out.established_us = Some(now);
                    flow.last_progress_us = now;
                    let stall = self.opts.stall_timeout_us;
                    self.flush(now, f, to, out)?;
                    if self.flows[f].setup.request.is_none() {
                        self.finish(now, f, None);
                        return Ok(());
                    }
                    self.schedule(now + stall, Event::StallCheck(f));
                } else {
                    if progressed {
                        flow.last_progress_us = now;
                    }
                    self.flush(now, f, to, out)?;
                }
                let want = 1 + u64::from(self.flows[f].setup.request.unwrap_or(0));
                if self.flows[f].setup.request.is_some() && rcv_nxt >= want {
                    self.finish(now, f, None);
                }
            }
        }
        Ok(())
    }

    fn run(&mut self) -> Result<(), PathLabError> {
        while let Some(Scheduled { at, event, .. }) = self.queue.pop() {
            if self.flows.iter().all(|f| f.done) {
                break;
            }
            let now = at;
            match event {
                Event::Start(f) => {
                    let flow = &mut self.flows[f];
                    flow.syn_sent_us = now;
                    flow.out.start_us = now;
                    let tcb = &mut flow.tcb[Side::Client as usize];
                    tcb.state = State::SynSent;
                    tcb.ctl_sent_us = now;
                    let syn = tcb.syn();
                    tcb.arm(now);
                    self.schedule(now + self.opts.connect_timeout_us, Event::ConnectDeadline(f));
                    self.flush(now, f, Side::Client, vec![syn])?;
                }
                Event::LinkArrive(w) => self.link_arrive(now, w),
                Event::Deliver(w) => self.deliver(now, w)?,
                Event::Timer { flow: f, side, gen } => {
                    let fl = &mut self.flows[f];
                    let tcb = &mut fl.tcb[side as usize];
                    if fl.done || gen != tcb.timer_gen || !tcb.timer_armed {
                        continue;
                    }
                    let mut out = Vec::new();
                    tcb.on_timeout(now, &mut out);
                    self.flush(now, f, side, out)?;
                }
                Event::ConnectDeadline(f) => {
                    if self.flows[f].tcb[Side::Client as usize].state != State::Established {
                        self.finish(now, f, Some(FailureReason::ConnectTimeout));
                    }
                }
                Event::StallCheck(f) => {
                    let fl = &self.flows[f];
                    if fl.done {
                        continue;
                    }
                    let stall = self.opts.stall_timeout_us;
                    if now - fl.last_progress_us >= stall {
                        self.finish(now, f, Some(FailureReason::Stall));
                    } else {
                        let at = fl.last_progress_us + stall;
                        self.schedule(at, Event::StallCheck(f));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Runs `flows` concurrently over `path`, starting from the path's clock,
/// and advances the clock to the end of the last flow.
pub fn simulate(path: &mut Path, opts: &SimOptions, flows: &[FlowSetup]) -> Result<Vec<SimFlow>, PathLabError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let base = path.now_us();
    let mut states = Vec::with_capacity(flows.len());
    for setup in flows {
        let client = endpoint(CLIENT_ADDR, setup.src_port);
        let server = endpoint(SERVER_ADDR, setup.dst_port);
        let tuple = FourTuple { src: client, dst: server };
        let tunnel = match setup.kind {
            FlowKind::Native => None,
            FlowKind::Tunneled => {
                let mut c = TunnelConfig::new(client.ip(), server.ip(), setup.dst_port);
                c.mirror_ports = true;
                c.interface_mtu = opts.interface_mtu;
                let mut s = TunnelConfig::new(server.ip(), client.ip(), setup.dst_port);
                s.mirror_ports = true;
                s.interface_mtu = opts.interface_mtu;
                c.validate().map_err(|e| PathLabError::Emulation(e.to_string()))?;
                Some([c, s])
            }
        };
        // A tunneled client sits behind the smaller virtual-interface MTU.
        let client_mss = match &tunnel {
            Some(cfgs) => cfgs[0].clamped_mss().min(opts.native_mss),
            None => opts.native_mss,
        };
        let tcb = [
            Tcb::new(rng.random(), client_mss, opts.iw_segments, State::Listen),
            Tcb::new(rng.random(), opts.native_mss, opts.iw_segments, State::Listen),
        ];
        let mut client_tcb = tcb;
        client_tcb[0].send_len = if setup.request.is_some() { REQUEST_LEN } else { 0 };
        client_tcb[0].send_ready = setup.request.is_some();
        states.push(FlowState {
            setup: setup.clone(),
            tcb: client_tcb,
            tunnel,
            done: false,
            syn_sent_us: 0,
            last_progress_us: 0,
            out: SimFlow {
                kind: setup.kind,
                result: FlowResult::failed(FailureReason::ConnectTimeout, 0, 0.0, None),
                start_us: 0,
                end_us: 0,
                established_us: None,
                client_trace: Vec::new(),
                server_trace: Vec::new(),
                max_wire_len: 0,
                wire_len_violations: 0,
                mss: None,
                inner_tuple: tuple,
                wire_tuple: tuple,
                capture: Vec::new(),
                drops: BTreeMap::new(),
            },
        });
    }
    let mut sim = Sim { path, opts, flows: states, queue: BinaryHeap::new(), order: 0 };
    for (i, setup) in flows.iter().enumerate() {
        sim.schedule(base + setup.start_us, Event::Start(i));
    }
    sim.run()?;
    let end = sim.flows.iter().map(|f| f.out.end_us).max().unwrap_or(base);
    let out: Vec<SimFlow> = sim.flows.into_iter().map(|f| f.out).collect();
    path.clock_us = path.clock_us.max(end);
    Ok(out)
}
